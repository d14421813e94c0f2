"""Desk-run probe: train the default config and report retrieval metrics."""

import json
import sys
import time

from asanet import config as C
from asanet import evaluate as E
from asanet.data import gen_dataset
from asanet.model import AsaNet
from asanet.train import Trainer

passes = int(sys.argv[1]) if len(sys.argv) > 1 else 2
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 7
out = sys.argv[3] if len(sys.argv) > 3 else "/tmp/e2e_probe"
lr = float(sys.argv[4]) if len(sys.argv) > 4 else 3e-4
lam_bce = float(sys.argv[5]) if len(sys.argv) > 5 else 0.0005
channels = int(sys.argv[6]) if len(sys.argv) > 6 else 32
image_h = int(sys.argv[7]) if len(sys.argv) > 7 else 64
image_w = int(sys.argv[8]) if len(sys.argv) > 8 else 32

cfg = C.default_config()
cfg["schedule"]["passes_per_epoch"] = passes
cfg["seed"] = seed
cfg["optim"]["lr"] = lr
cfg["loss"]["lambda_bce"] = lam_bce
cfg["model"]["channels"] = channels
cfg["data"]["image"] = [image_h, image_w]

t0 = time.time()
ds = gen_dataset(cfg["seed"], **C.dataset_kwargs(cfg))
model = AsaNet(C.model_config(cfg, ds.num_train_identities), seed=cfg["seed"])
trainer = Trainer(ds, model, C.loss_weights(cfg), C.optim_config(cfg),
                  C.schedule(cfg), C.train_settings(cfg), out)
result = trainer.run()
train_time = time.time() - t0
print(f"trained {result.steps} steps in {train_time/60:.1f} min")
print("final:", {k: round(v, 4) for k, v in result.final_losses.items()})

rows = result.log_path.read_text().strip().splitlines()[1:]
bces = [float(r.split(",")[4]) for r in rows]
lams = [float(r.split(",")[6]) for r in rows]
print(f"bce first/last: {bces[0]:.3f} / {bces[-1]:.3f}; lambda values: {sorted(set(lams))}")

for setup in ("usual", "mixing"):
    res = E.evaluate_dataset(model, ds, setup=setup, seed=99)
    print(f"{setup}: mAP={res.mean_ap:.4f} rank1={res.cmc[0]:.4f} "
          f"rank5={res.cmc[min(4, len(res.cmc)-1)]:.4f} "
          f"({res.num_queries_evaluated} queries)")
print(f"total {(time.time()-t0)/60:.1f} min")
