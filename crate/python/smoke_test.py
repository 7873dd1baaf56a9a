"""Smoke test for the Python bindings.

Build the extension first:

    cargo build -p anglereloc-py --release --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built
library next to itself under the importable name and exercises each binding.
"""

import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module(tmp):
    for name in ("libanglereloc.so", "libanglereloc.dylib", "anglereloc.dll"):
        built = ROOT / "target" / "release" / name
        if built.exists():
            suffix = ".pyd" if name.endswith(".dll") else ".so"
            shutil.copy(built, pathlib.Path(tmp) / ("anglereloc" + suffix))
            sys.path.insert(0, tmp)
            import anglereloc

            return anglereloc
    sys.exit("extension not built; see the module docstring")


def rot_y(a, t):
    c, s = math.cos(a), math.sin(a)
    return [[c, 0.0, s, t[0]], [0.0, 1.0, 0.0, t[1]], [-s, 0.0, c, t[2]], [0.0, 0.0, 0.0, 1.0]]


def project(pose, k, y):
    # camera-to-world pose, so D = R^T (y - t)
    f, cx, cy = k
    d = [y[i] - pose[i][3] for i in range(3)]
    cam = [sum(pose[r][c] * d[r] for r in range(3)) for c in range(3)]
    return [f * cam[0] / cam[2] + cx, f * cam[1] / cam[2] + cy], cam


def main():
    with tempfile.TemporaryDirectory() as tmp:
        ar = load_module(tmp)
        k = (73.125, 40.0, 30.0)
        pose = rot_y(0.3, [0.5, -0.2, 1.0])
        y = [1.0, 0.4, 6.0]
        pixel, cam = project(pose, k, y)

        v, g = ar.angle_loss(pose, k, y, pixel)
        assert v < 1e-9, v
        v, g = ar.reproj_loss(pose, k, y, pixel)
        assert v < 1e-9, v

        # behind-camera antipode: reprojection is blind to it, the angle loss is not
        c = [pose[i][3] for i in range(3)]
        anti = [2 * c[i] - y[i] for i in range(3)]
        v_rep, _ = ar.reproj_loss(pose, k, anti, pixel)
        v_ang, _ = ar.angle_loss(pose, k, anti, pixel)
        ray = math.sqrt((pixel[0] - k[1]) ** 2 + (pixel[1] - k[2]) ** 2 + k[0] ** 2)
        assert v_rep < 1e-9, v_rep
        assert abs(v_ang - 2 * ray) < 1e-9 * ray, (v_ang, ray)

        pts, pix = [], []
        for i in range(60):
            w = [math.sin(i) * 2 + 0.5, math.cos(1.7 * i), 6.0 + math.sin(0.3 * i)]
            p, _ = project(pose, k, w)
            pts.append(w)
            pix.append(p)
        est, inliers, status = ar.localize(pix, pts, k, seed=1)
        rot, trans = ar.pose_error(est, pose)
        assert status == "Ok" and inliers == 60, (status, inliers)
        assert rot < 1e-6 and trans < 1e-6, (rot, trans)

        n = ar.generate_scene(0, str(pathlib.Path(tmp) / "scene"), render=False)
        assert n == 40 and (pathlib.Path(tmp) / "scene" / "manifest.json").exists()
    print("python smoke test passed")


if __name__ == "__main__":
    main()
