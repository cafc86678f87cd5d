import time
import numpy as np
from specklediff.checkpoints import load_checkpoint, save_checkpoint
from specklediff.predictor import as_noise_fn
from specklediff import diffusion as df
from specklediff.optim import AdamState
from specklediff.speckle import SpeckleParams, make_dataset, synthetic_textures, sample_speckle, apply_speckle
from specklediff.cyclespin import CycleSpinPlan, despeckle_cs
from specklediff.metrics import psnr, ssim
from specklediff.diffusion import TrainConfig, train, make_schedule, q_sample, to_signed

t0 = time.time()
params, cfg, _, it0 = load_checkpoint("/root/pkg/.devruns/probe1.ckpt")
texs = synthetic_textures(30, 96, seed=7)
pairs = make_dataset(texs[:20], SpeckleParams(1.0), 32, 2000, seed=11)
# fresh optimizer state (probe1 did not save it); slight warmup transient is fine
tc = TrainConfig(iterations=2400, batch_size=4, learning_rate=3e-4, T=100, seed=1, checkpoint_interval=2400)
res = train(pairs, params, cfg, tc)
print(f"train done {time.time()-t0:.0f}s; tail loss {np.mean(res.losses[-100:]):.4f}", flush=True)
save_checkpoint("/root/pkg/.devruns/probe2.ckpt", res.params, cfg, {"T": 100, "beta_start": None, "beta_end": None}, it0 + 2400)

sched = res.schedule
fn = as_noise_fn(res.params, cfg)

# bias re-measure
r = np.random.default_rng(1)
for t in (5, 15, 30, 50, 100):
    biases = []
    for k in range(16):
        p = pairs[int(r.integers(len(pairs)))]
        x0 = to_signed(p.clean)[None, None]; cond = to_signed(p.speckled)[None, None]
        eps = r.standard_normal(x0.shape, dtype=np.float32)
        eh = fn(q_sample(x0, t, eps, sched), cond, t)
        biases.append(float((eh - eps).mean()))
    print(f"bias t={t:3d}: {np.mean(biases):+.4f}", flush=True)

rng = np.random.default_rng(99)
plan1 = CycleSpinPlan(((0, 0),))
rows = []
for i, tex in enumerate(texs[20:]):
    clean = tex[:32, :32]
    field = sample_speckle((32, 32), SpeckleParams(1.0), rng)
    speck = apply_speckle(clean, field)
    out = despeckle_cs(speck, plan1, fn, sched, seed=1000 + i)
    rows.append((psnr(clean, speck), psnr(clean, out), ssim(clean, speck), ssim(clean, out)))
    print(f"img {i}: psnr {rows[-1][0]:.2f} -> {rows[-1][1]:.2f}, ssim {rows[-1][2]:.3f} -> {rows[-1][3]:.3f}", flush=True)
arr = np.array(rows)
print(f"MEAN: psnr {arr[:,0].mean():.2f} -> {arr[:,1].mean():.2f} (gain {arr[:,1].mean()-arr[:,0].mean():+.2f} dB), "
      f"ssim {arr[:,2].mean():.3f} -> {arr[:,3].mean():.3f} (gain {arr[:,3].mean()-arr[:,2].mean():+.3f})", flush=True)
print(f"total {time.time()-t0:.0f}s")
