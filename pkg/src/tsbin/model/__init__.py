"""Networks over represented series: embeddings, feed-forward and dilated CNN, training."""

from .autograd import Tensor
from .network import (
    ARCHITECTURES,
    ModelConfig,
    ModelError,
    NetworkSpec,
    StepInputs,
    assemble_input,
    build_network_spec,
    embed,
    embedding_dim,
    forward,
    init_parameters,
    layers_for_context,
    parameter_count,
    parameter_shapes,
    parameter_tensors,
    receptive_field,
    unflatten,
)
from .training import (
    AdamState,
    Batch,
    NonFiniteLossError,
    PlateauSchedule,
    TrainConfig,
    TrainedModel,
    adam_step,
    batch_loss,
    load_model,
    loss_and_gradients,
    make_batch,
    predict,
    predict_panel,
    sample_windows,
    save_model,
    series_rng,
    train,
    training_arrays,
)
