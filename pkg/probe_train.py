"""Criterion-6-shaped probe run: 64 train + 8 val, tiny config, 200 epochs."""
import json
import time
import logging

import numpy as np

from ssmfusion import data, metrics, network as N, training as tr, tensor as T
from ssmfusion.tensor import Tensor

logging.basicConfig(level=logging.WARNING)

samples, _ = data.generate_synthetic(11, 72, 64, 64, 8)
train_s, val_s = samples[:64], samples[64:]


def bicubic4(lr):
    return T.bicubic_upsample2(T.bicubic_upsample2(Tensor(lr))).data


base_psnr = float(np.mean([metrics.psnr(np.clip(bicubic4(s.lr), 0, 1), s.gt) for s in val_s]))
base_sam = float(np.mean([metrics.sam(np.clip(bicubic4(s.lr), 0, 1), s.gt) for s in val_s]))
print(f"baseline psnr {base_psnr:.3f} sam {base_sam:.3f}", flush=True)

cfg = N.FusionNetConfig(bands=8, channels=8, state_size=4, upsample="bicubic")
net = N.build_fusion_net(cfg, seed=1)
tc = tr.TrainConfig(epochs=200, batch_size=4, lr0=1e-3, halve_every=200, seed=5, eval_every=20)
t0 = time.time()
hist = tr.train(net, train_s, tc, val_samples=val_s)
dt = time.time() - t0
for h in hist:
    if "psnr" in h or h["epoch"] == 1:
        print(json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in h.items()}), flush=True)
print(f"RUNTIME {dt:.0f}s  loss ratio {hist[-1]['loss']/hist[0]['loss']:.4f}")
print(f"final vs baseline: dPSNR {hist[-1]['psnr']-base_psnr:+.2f}  sam {hist[-1]['sam']:.3f} vs {base_sam:.3f}")
