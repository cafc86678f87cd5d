import json, time
import numpy as np
from specklediff.predictor import PredictorConfig, init_params, as_noise_fn
from specklediff import diffusion as df
from specklediff.optim import AdamState
from specklediff.speckle import SpeckleParams, make_dataset, synthetic_textures, sample_speckle, apply_speckle
from specklediff.cyclespin import CycleSpinPlan, despeckle_cs
from specklediff.metrics import psnr, ssim
from specklediff.diffusion import TrainConfig, train
from specklediff.checkpoints import save_checkpoint

t0 = time.time()
cfg = PredictorConfig()
texs = synthetic_textures(30, 96, seed=7)
train_tex, test_tex = texs[:20], texs[20:]
pairs = make_dataset(train_tex, SpeckleParams(1.0), 32, 2000, seed=11)
params = init_params(cfg, seed=0)
tc = TrainConfig(iterations=1200, batch_size=4, learning_rate=3e-4, T=100, seed=0, checkpoint_interval=1200)
res = train(pairs, params, cfg, tc)
print(f"train done {time.time()-t0:.0f}s; loss[0]={res.losses[0]:.3f} loss[-50:]mean={np.mean(res.losses[-50:]):.4f}", flush=True)
save_checkpoint("/root/pkg/.devruns/probe1.ckpt", res.params, cfg, {"T": 100, "beta_start": None, "beta_end": None}, tc.iterations)

# held-out pairs: 32x32 crops of test textures
rng = np.random.default_rng(99)
fn = as_noise_fn(res.params, cfg)
plan1 = CycleSpinPlan(((0, 0),))
rows = []
for i, tex in enumerate(test_tex):
    clean = tex[:32, :32]
    field = sample_speckle((32, 32), SpeckleParams(1.0), rng)
    speck = apply_speckle(clean, field)
    out = despeckle_cs(speck, plan1, fn, res.schedule, seed=1000 + i)
    rows.append((psnr(clean, speck), psnr(clean, out), ssim(clean, speck), ssim(clean, out)))
    print(f"img {i}: psnr {rows[-1][0]:.2f} -> {rows[-1][1]:.2f}, ssim {rows[-1][2]:.3f} -> {rows[-1][3]:.3f}", flush=True)
arr = np.array(rows)
print(f"MEAN: psnr {arr[:,0].mean():.2f} -> {arr[:,1].mean():.2f} (gain {arr[:,1].mean()-arr[:,0].mean():+.2f} dB), "
      f"ssim {arr[:,2].mean():.3f} -> {arr[:,3].mean():.3f} (gain {arr[:,3].mean()-arr[:,2].mean():+.3f})", flush=True)
print(f"total {time.time()-t0:.0f}s")
