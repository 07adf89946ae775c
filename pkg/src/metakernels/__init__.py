"""Meta-learned kernels from variational random Fourier features.

An inference network maps each few-shot task to a Gaussian over random
feature frequencies, a query-conditioned prior regularizes it through the
KL term of the ELBO, and kernel ridge regression on the sampled features
is the base learner.  Everything is differentiated by the small tape in
:mod:`metakernels.autodiff`.
"""

from .autodiff import Graph, Node, finite_difference_gradient, forward_op
from .elbo import ELBOTerms, TrainConfig, episode_elbo, evaluate, gaussian_kl, meta_train
from .networks import FrequencyPosterior, MetaKernelNet, cross_attention, instance_pool
from .optim import AdamState, adam_step
from .rff import SampledBases, kernel_matrix, predict, reparameterize_sample, rff_feature_map, solve_krr
from .tasks import ClusterTaskSpec, SineTaskSpec, Task, episode_stream, sample_cluster_task, sample_sine_task

__version__ = "0.1.0"
