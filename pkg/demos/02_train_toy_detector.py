"""Train the mini detector on a small shapes dataset and look at its detections.

A few minutes on one core.  The full default run (500 images, 60 epochs) is
``faenet train --out runs/toy``.
"""
# %%
import time

from faenet import data as Dt
from faenet import detector as D
from faenet import train as TR

spec = Dt.SynthSpec(seed=0, num_images=160)
train_set = Dt.generate(spec)
eval_set = Dt.generate(spec, start=160, count=40)
print(len(train_set), "train images,", len(eval_set), "eval images")
print("first sample:", [(spec.classes[g.class_id - 1], tuple(round(v, 2) for v in g.box))
                        for g in train_set[0].annotations])

# %% [markdown]
# Eight epochs with a short warm-up and one decay step.

# %%
cfg = TR.TrainConfig(total_epochs=8, warmup_epochs=1, milestone_epochs=(6,), batch_size=16)
t0 = time.perf_counter()
result = TR.train(D.mini_config(), cfg, train_set, eval_set,
                  echo=lambda r: r["kind"] == "eval" and print(f"epoch {r['epoch']}: mAP {r['map']:.3f}"))
print(f"trained in {time.perf_counter() - t0:.0f}s")

# %%
report = TR.evaluate_model(result.detector, eval_set)
print("per-class AP:", {spec.classes[c - 1]: round(v, 3) for c, v in report.per_class_ap.items()})
print(f"mAP {report.map:.3f}, COCO-style AP {report.ap:.3f}, AP75 {report.ap75:.3f}")

# %% [markdown]
# Detections for one held-out image, against its ground truth.

# %%
preds = TR.predict(result.detector, eval_set[:1], conf_threshold=0.3)
sample = eval_set[0]
for g in sample.annotations:
    print("truth    ", spec.classes[g.class_id - 1], tuple(round(v, 2) for v in g.box))
for d in preds[sample.image_id]:
    print("detected ", spec.classes[d.class_id - 1], tuple(round(v, 2) for v in d.box), f"score {d.score:.2f}")
