# Meta-train a kernel on sine tasks, then compare against untrained random features.
#
# Short run (about a minute); the full-scale version is
#   metakernels train --config sine.yaml
import numpy as np

from metakernels import MetaKernelNet, TrainConfig, evaluate, meta_train
from metakernels.tasks import SineTaskSpec, episode_seed, episode_stream, sample_sine_task

spec = SineTaskSpec()
shots = 5
cfg = TrainConfig(lr=1e-3, iterations=1500, episodes_per_iteration=6, num_bases=128)


def make_task(seed):
    return sample_sine_task(spec, shots, 15, seed)


net = MetaKernelNet(1, rng=np.random.default_rng(cfg.init_seed))
stream = episode_stream(make_task, cfg.episodes_per_iteration, cfg.iterations, seed=0)
result = meta_train(cfg, net, stream)

elbo = np.array([r.elbo for r in result.history])
w = len(elbo) // 10
print(f"ELBO first 10%: {elbo[:w].mean():9.2f}   last 10%: {elbo[-w:].mean():9.2f}")

held_out = [make_task(episode_seed(0, 1, i)) for i in range(100)]
for mode in ("mean", "sampled", "baseline"):
    r = evaluate(net, held_out, cfg, mode)
    print(f"{mode:9s} MSE {r['metric_mean']:.4f} +- {r['metric_std']:.4f}")
