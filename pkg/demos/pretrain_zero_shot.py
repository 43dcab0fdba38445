"""Distill three synthetic teachers into one splat encoder, then segment by nearest prototype.

Nothing here sees a label directly: the model only regresses the uplifted
teacher features. Zero-shot labels come from comparing the predicted language
feature with each class prototype.

    python demos/pretrain_zero_shot.py --epochs 100 --out demo_out
"""

import argparse
from pathlib import Path

from splatdistill.distill import DistillModel, EncoderConfig, TeacherSchedule, save_checkpoint
from splatdistill.distill.train import OptimConfig, pretrain
from splatdistill.eval import metrics_table, pca_visualize, zero_shot_segment
from splatdistill.pipeline import DEFAULT_TEACHERS, build_dataset
from splatdistill.synth import orbit_cameras, prototypes, synth_scene, tabletop_layout

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--epochs", type=int, default=100)
parser.add_argument("--out", default="demo_out")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

train = [synth_scene(tabletop_layout(v), v) for v in (0, 1)]
held = synth_scene(tabletop_layout(2, palette_shift=0.15), 2)
samples, transforms = build_dataset(train)
dims = {t.teacher_id: transforms[t.teacher_id].output_dim for t in DEFAULT_TEACHERS}
print("teacher widths after standardization:", dims)

model = DistillModel(EncoderConfig(), dims)
model.fit_input_stats(train)
model, history = pretrain(model, samples, TeacherSchedule.uniform(dims), args.epochs, OptimConfig(lr=3e-3))
totals = history.totals()
print(f"{model.n_parameters()} parameters; loss {totals[0]:.3f} -> {totals[-1]:.3f} over {args.epochs} epochs")
save_checkpoint(model, out / "model.chmd")
history.to_csv(out / "loss_history.csv")

protos = prototypes("lang", 6, 16, 0)
rows = {name: zero_shot_segment(model, s, protos, transforms["lang"]).metrics
        for name, s in (("train0", train[0]), ("train1", train[1]), ("heldout", held))}
print(metrics_table(rows))

cam = orbit_cameras(held, 1, 160, 120, phase=0.6)[0]
pca_visualize(model.encode(held), held, cam, out / "heldout_pca.ppm")
print(f"embedding PCA of the held-out scene written to {out / 'heldout_pca.ppm'}")
