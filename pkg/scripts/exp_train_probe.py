"""Desk-scale learning probe: does the trained field beat the source domain?

Trains on 8 target phantoms (32^3, patch 16^3) and reports
self-reconstruction PSNR on held-out targets plus harmonization PSNR for
strong/mild source contrasts against the source-vs-target baseline.
"""

import sys
import time

import numpy as np

from edgeflow3d import backend
from edgeflow3d.edges import CannyConfig, adaptive_edge_detect
from edgeflow3d.field import FieldArch, VelocityField
from edgeflow3d.flow import FlowTrainConfig, SamplerConfig, harmonize, train
from edgeflow3d.metrics import psnr, ssim3d
from edgeflow3d.patches import PatchSamplerConfig
from edgeflow3d.phantom import ContrastFunction, PhantomSpec, generate_corpus
from edgeflow3d.refine import RefineConfig, refine_ncc
from edgeflow3d.volume import threshold_mask

backend.set_backend("python")

WIDTH = int(sys.argv[1]) if len(sys.argv) > 1 else 8
STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 1500
RHO = float(sys.argv[3]) if len(sys.argv) > 3 else 0.2

c_tar = ContrastFunction(points=((0, 0.0), (0.5, 0.52), (1.0, 0.98)), noise_sigma=0.01)
c_strong = ContrastFunction(
    points=((0, 0.06), (0.15, 0.45), (0.4, 0.62), (0.7, 0.8), (1.0, 0.97)),
    bias_amp=0.06,
    bias_coeffs=(-0.5, 0.7, 0.2, -0.3, 0.4, -0.6, 0.2, 0.5, -0.4),
    noise_sigma=0.01,
)
c_mild = ContrastFunction(points=((0, 0.03), (0.5, 0.42), (1.0, 0.9)), noise_sigma=0.01)

spec = PhantomSpec(dims=(32, 32, 32), n_shapes=7, texture_amp=0.04, smooth_sigma=0.6, rng_seed=11)
corpus = generate_corpus(
    spec, 13, c_tar, {"strong": c_strong, "mild": c_mild}, rng=np.random.default_rng(11),
    split_fractions=(8 / 13, 1 / 13, 4 / 13),
)
canny = CannyConfig()
train_vols = [corpus.subjects[i].target for i in corpus.split["train"]]
train_edges = [adaptive_edge_detect(v, canny) for v in train_vols]

arch = FieldArch(base_width=WIDTH, channel_mults=(1, 2), time_dim=16, dtype="float32")
field = VelocityField.create(arch, np.random.default_rng(0))
t0 = time.time()
field, trace = train(
    field,
    train_vols,
    train_edges,
    FlowTrainConfig(learning_rate=2e-4, batch_size=4, steps=STEPS, rng_seed=0),
    PatchSamplerConfig(patch_size=16, multistride_ratio=RHO, rng_seed=0),
)
losses = [l for _, l in trace]
print(f"width={WIDTH} steps={STEPS} rho={RHO} time={time.time()-t0:.0f}s "
      f"loss first100={np.mean(losses[:100]):.4f} last100={np.mean(losses[-100:]):.4f}")

sampler = SamplerConfig(n_steps=16, rng_seed=123)
for idx in corpus.split["val"] + corpus.split["test"]:
    s = corpus.subjects[idx]
    m = threshold_mask(s.target, 0.05)
    recon = harmonize(field, s.target, canny, sampler)
    line = (f"subj{idx}: recon PSNR={psnr(recon, s.target, m):.2f} "
            f"SSIM={ssim3d(recon, s.target, m):.3f}")
    for name in ("strong", "mild"):
        src = s.sources[name]
        har = harmonize(field, src, canny, sampler)
        ref = refine_ncc(har, src, RefineConfig())
        line += (f" | {name}: src={psnr(src, s.target, m):.2f} "
                 f"har={psnr(har, s.target, m):.2f} ref={psnr(ref, s.target, m):.2f} "
                 f"ssim src={ssim3d(src, s.target, m):.3f} har={ssim3d(har, s.target, m):.3f}")
    print(line)
