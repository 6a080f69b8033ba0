"""Export 2-D PCA projections of the transform layer's outputs before and
after adaptation, for plotting with any external tool.

Writes embeddings_initial.csv and embeddings_adapted.csv (columns
x,y,domain,label) into ./demo_out.
"""

from pathlib import Path

import numpy as np

import dualda as dd

out = Path("demo_out")
out.mkdir(exist_ok=True)

SEED = 1
ss = lambda k: int(np.random.SeedSequence([SEED, k]).generate_state(1)[0])
source = dd.gen_two_moons(400, 0.1, ss(0))
target = dd.domain_shift(dd.gen_two_moons(400, 0.1, ss(1)), 40.0)

model = dd.DualModel.build(2, 32, 2, seed=SEED)
dd.export_embeddings(model, source, target, 400, out / "embeddings_initial.csv")

cfg = dd.TrainConfig(variant="dann", epochs=60, batch_size=16, eval_every=60,
                     seed=SEED, schedule=dd.Schedule(eta0=0.012, momentum=0.9))
model, records = dd.train(cfg, source, target)
dd.export_embeddings(model, source, target, 400, out / "embeddings_adapted.csv")

print(f"target accuracy after adaptation: {records[-1].tgt_acc:.3f}")
print(f"wrote {out / 'embeddings_initial.csv'} and "
      f"{out / 'embeddings_adapted.csv'}")
print("plot x,y colored by domain to see the domains fuse after training")
