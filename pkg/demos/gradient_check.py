# Compare reverse-mode gradients of the whole ELBO against central differences.
import numpy as np

from metakernels import MetaKernelNet, TrainConfig
from metakernels.gradcheck import check_elbo_gradients
from metakernels.tasks import ClusterTaskSpec, sample_cluster_task

task = sample_cluster_task(ClusterTaskSpec(dim=8, ways=2, shots=1), 5, seed=0)

for mode in ("vanilla-lstm", "bi-lstm", "no-lstm"):
    net = MetaKernelNet(8, mode=mode, rng=np.random.default_rng(0))
    errs = check_elbo_gradients(net, [task], TrainConfig(num_bases=16, mode=mode))
    name = max(errs, key=errs.get)
    print(f"{mode:13s} {net.num_parameters():6d} params  worst group {name}: {errs[name]:.1e}")
