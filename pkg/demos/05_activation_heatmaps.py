"""Class activation maps: where the fitted model finds its evidence for a
class, rendered through the blue-to-red colormap with a thresholded overlay.

Reuses demo_output/fitted.ckpt from demo 03 when present, otherwise trains a
fresh model first.

Run:  python3 demos/05_activation_heatmaps.py
"""

from pathlib import Path

from tfcns.data import SyntheticSpec, generate_synthetic, write_cam_overlay, write_heatmap
from tfcns.model import ModelConfig, build, class_activation_map, model_from_checkpoint
from tfcns.training import TrainConfig, train

out = Path("demo_output")
out.mkdir(exist_ok=True)

pairs = generate_synthetic(SyntheticSpec(
    n_cases=6, height=16, width=16, num_classes=3,
    noise_sigma=0.01, seed=2, radius_min=2, radius_max=3,
))

ckpt = out / "fitted.ckpt"
if ckpt.is_file():
    model, _ = model_from_checkpoint(ckpt)
    print("loaded", ckpt)
else:
    model = build(ModelConfig(
        in_channels=1, num_classes=3, input_size=16, first_conv_channels=8,
        growth_rate=6, layers_per_block=(2, 2, 2), patch_size=8, embed_dim=16,
        transformer_layers=1, n_heads=2, dropout_p=0.0, seed=0,
    ))
    train(model, pairs, TrainConfig(lr=0.02, batch_size=6, max_iterations=200, eval_every=0,
                                    augment_rotate=False, augment_flip=False, seed=0))
    print("trained a fresh model (run demo 03 first to reuse its checkpoint)")

case = pairs[0]
for cls in (1, 2):
    heat = class_activation_map(model, case.image[None], cls)[0]
    inside = heat[case.mask == cls].mean() if (case.mask == cls).any() else float("nan")
    outside = heat[case.mask != cls].mean()
    print(f"class {cls}: mean activation inside its region {inside:.3f} vs outside {outside:.3f}")
    write_heatmap(out / f"cam_class{cls}.ppm", heat)
    write_cam_overlay(out / f"cam_class{cls}_overlay.ppm", heat, threshold=0.4, image=case.image)

print("wrote", ", ".join(str(p) for p in sorted(out.glob("cam_*.ppm"))))
print("colormap runs blue (low) -> cyan -> yellow -> red (high); overlay zeroes pixels at or")
print("below the activation threshold, showing the grayscale input there instead")
