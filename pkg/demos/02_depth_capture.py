"""From a phantom to what a depth camera actually sees.

The sensor model is a 64x64 virtual pinhole camera. It renders the skin
(the outermost labeled surface) as a ray-length depth image and then
backprojects the valid pixels into a camera-space point cloud -- the only
input the localization network ever receives. Internal structures are
invisible by construction.

Run:  python3 demos/02_depth_capture.py
"""

from pathlib import Path

import numpy as np

from occatlas.phantom import PhantomSpec, extract_skin, generate_phantom
from occatlas.sensor import CameraPose, backproject, normalize_iso, render_depth, save_xyz

out = Path("demo_out/capture")
out.mkdir(parents=True, exist_ok=True)

volume = generate_phantom(PhantomSpec(seed=3, num_structures=5))
skin = extract_skin(volume)
idx = np.argwhere(np.asarray(volume.labels) > 0)
center = volume.origin + volume.spacing * (0.5 * (idx.min(axis=0) + idx.max(axis=0) + 1))

# Three captures: frontal, and two offset poses around the body.
for name, (lat, vert) in [("frontal", (0.0, 0.0)), ("oblique", (0.6, 0.3)), ("high", (0.2, 0.9))]:
    pose = CameraPose(distance=2.0, lateral=lat, vertical=vert, target=center)
    depth = render_depth(skin, pose)
    valid = np.isfinite(depth)
    cloud = backproject(depth, seed=0)
    print(
        f"{name:8s}: {valid.sum():4d}/{depth.size} pixels hit, "
        f"depth range [{depth[valid].min():.3f}, {depth[valid].max():.3f}] m, "
        f"{len(cloud.points)} points"
    )
    save_xyz(cloud, out / f"{name}.xyz")

# Normalization: what the network sees is the cloud mapped into [-1, 1]^3.
pose = CameraPose(2.0, 0.0, 0.0, center)
cloud = backproject(render_depth(skin, pose), seed=0)
normalized, norm = normalize_iso(cloud)
print(f"\nnormalization scale {norm.scale:.3f} (1 normalized unit = {100 / norm.scale:.1f} cm)")
print(f"normalized extent: {np.ptp(normalized.points, axis=0).round(3)}")
roundtrip = norm.invert(normalized.points)
print(f"round-trip error: {np.abs(roundtrip - cloud.points).max():.2e} m")
print(f"clouds written to {out}/")
