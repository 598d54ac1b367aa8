"""Multi-domain text classification via contrastively aligned universal
feature extractors, hardened with normalized-gradient adversarial training.
"""

from .autodiff import (NumericsError, ShapeError, Tape, TapeError, Tensor,
                       grad_check, grad_check_params)
from .data import (Corpus, DataError, Instance, SynthConfig, load_sparse,
                   save_sparse, split, stratified_batches, synth_generate,
                   topk_features)
from .losses import (BatchCompositionError, LossBundle, adv_noise,
                     combine_losses, nll_loss, supcon_loss)
from .metrics import AlignmentReport, Metrics, alignment_report, evaluate
from .model import (MlpSpec, ModelParams, classifier_spec, extract,
                    extractor_spec, forward, init_params, load_checkpoint,
                    save_checkpoint)
from .trainer import (AdamState, HyperParams, StepCounters, TrainHistory,
                      adam_step, train, train_step)

__version__ = "0.1.0"
