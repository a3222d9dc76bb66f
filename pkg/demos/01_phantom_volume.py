"""Generate a synthetic spine phantom and look at what was planted.

The phantom stacks box-shaped vertebral bodies along a sinusoidally curved
centerline.  Every body realizes an exact (anterior, middle, posterior)
height triple, so the Genant index of each vertebra is known in closed form
before any image processing happens.
"""
import numpy as np

from spinequant import PhantomConfig, generate_phantom, heights, write_va1, write_vg1

cfg = PhantomConfig(scoliosis_amplitude_mm=20.0, seed=7)
volume, annotations, planted = generate_phantom(cfg)

print(f"volume: shape={volume.shape}, spacing={volume.spacing} mm")
print(f"vertebrae: {len(annotations)}")
print()
print("vertebra   h_a    h_m    h_p    Genant")
for kps, g in zip(annotations, planted):
    h_a, h_m, h_p = heights(kps)
    print(f"{kps.label:>8}  {h_a:5.1f}  {h_m:5.1f}  {h_p:5.1f}    {g:.2f}")

centers = np.stack([a.center() for a in annotations])
print()
print(f"lateral drift of body centers (scoliosis): "
      f"{centers[:, 0].max() - centers[:, 0].min():.1f} mm")

write_vg1("phantom_volume.vg1", volume)
write_va1("phantom_gt.va1", annotations)
print("wrote phantom_volume.vg1 / phantom_gt.va1")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mid = volume.shape[0] // 2
    fig, axes = plt.subplots(1, 2, figsize=(8, 6))
    axes[0].imshow(volume.values[mid].T, origin="lower", cmap="gray")
    axes[0].set_title("naive central sagittal plane")
    axes[1].imshow(volume.values[:, volume.shape[1] // 2, :].T, origin="lower",
                   cmap="gray")
    axes[1].set_title("coronal plane (note the curve)")
    fig.tight_layout()
    fig.savefig("phantom_planes.png", dpi=110)
    print("wrote phantom_planes.png")
except ImportError:
    pass
