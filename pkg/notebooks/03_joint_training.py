"""Joint training of the three decoders on a small synthetic set.

A reduced encoder keeps this under a minute on one CPU core.  The loop is the
library's ``train``; the callback prints a loss line every 20 steps.

Run: python3 notebooks/03_joint_training.py [output_dir]
"""
import sys
import tempfile
from pathlib import Path

from multinet.data_io import SyntheticConfig, generate_synthetic, write_overlay
from multinet.encoder import EncoderConfig
from multinet.evaluation import detections, evaluate, fit_statistics, predict
from multinet.model import MultiNet, NetworkConfig
from multinet.training import Adam, Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="multinet_demo_"))
out_dir.mkdir(parents=True, exist_ok=True)

scene_cfg = SyntheticConfig(width=128, height=64, min_vehicle=10, max_vehicle=30)
train_set = generate_synthetic(8, seed=1, config=scene_cfg)
val_set = generate_synthetic(8, seed=2, config=scene_cfg)

net_cfg = NetworkConfig(encoder=EncoderConfig(stage_channels=(8, 8, 16, 16, 32), input_h=64, input_w=128),
                        det_bottleneck=32)
model = MultiNet(net_cfg, seed=0)
cfg = TrainConfig(learning_rate=3e-3, augment_seg=False, augment_det=False, augment_cls=False)
print(f"{model.num_parameters()} parameters")


def show(report, _model):
    if report.step % 20 == 0:
        print(report.format())


datasets = {"seg": train_set, "det": train_set, "cls": train_set}
opt, reports = train(model, datasets, cfg, steps=100, callback=show)
print("fit on the training images:", fit_statistics(model, train_set).as_dict())
print("held-out scores:", evaluate(model, val_set, ["seg", "det", "cls"]))

# Checkpoints carry parameters, Adam moments and the step, so training resumes exactly.
path = out_dir / "demo.ckpt"
save_checkpoint(path, Checkpoint.capture(model, opt, reports[-1].step, cfg))
resumed = MultiNet(net_cfg, seed=99)
resumed_opt = Adam.from_config(resumed.params, cfg)
ckpt = load_checkpoint(path)
ckpt.restore(resumed, resumed_opt)
_, a = train(model, datasets, cfg, optimizer=opt, start_step=ckpt.step, steps=3)
_, b = train(resumed, datasets, cfg, optimizer=resumed_opt, start_step=ckpt.step, steps=3)
print("resumed run matches:", [r.losses for r in a] == [r.losses for r in b])

pred = predict(model, val_set[:1], ["seg", "det"])
boxes = detections(pred.det_raw, net_cfg.grid)[0]
write_overlay(out_dir / "overlay.ppm", val_set[0].image, boxes, pred.seg_prob[0])
print("overlay written to", out_dir / "overlay.ppm")
