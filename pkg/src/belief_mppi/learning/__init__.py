from .nets import NetworkParams, WeightsFormatError, forward_mean_comp
from .loss import nll_loss, SingularCovarianceError
from .datasets import TrajectorySample, read_dataset, write_dataset

# belief_mppi.learning.train imports belief propagation, which imports the
# network definitions above; import it as a submodule to keep the graph acyclic.

__all__ = [
    "NetworkParams", "WeightsFormatError", "forward_mean_comp",
    "nll_loss", "SingularCovarianceError",
    "TrajectorySample", "read_dataset", "write_dataset",
]
