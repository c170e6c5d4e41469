"""Builds the extension module with cargo and exercises it from Python.

Usage: python3 python/smoke.py [--no-build]
"""
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build(dest: Path) -> None:
    if "--no-build" not in sys.argv:
        subprocess.run(
            ["cargo", "build", "-p", "splathead-py", "--features", "extension-module"],
            cwd=ROOT,
            check=True,
        )
    lib = ROOT / "target" / "debug" / "libsplathead_py.so"
    shutil.copy(lib, dest / "splathead_py.so")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        build(tmp)
        sys.path.insert(0, str(tmp))
        import splathead_py as sp

        print("splathead", sp.version())
        a = [0.5] * (12 * 12 * 3)
        b = [0.6] * (12 * 12 * 3)
        assert sp.psnr(a, a, 12, 12) == 99.0
        assert abs(sp.psnr(a, b, 12, 12) - 20.0) < 1e-9
        assert abs(sp.ssim(a, a, 12, 12) - 1.0) < 1e-12

        cov = sp.covariance([1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0])
        assert [cov[i][i] for i in range(3)] == [1.0, 4.0, 9.0]
        eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        assert abs(sp.gaussian_pdf([0, 0, 0], [0, 0, 0], eye) - (2 * math.pi) ** -1.5) < 1e-15
        sh = [0.0] * 48
        sh[0] = 1.0
        assert abs(sp.sh_eval(sh, [0.0, 0.0, 1.0])[0] - (0.28209479177387814 + 0.5)) < 1e-15
        try:
            sp.sh_eval([0.0], [0.0, 0.0, 1.0])
            raise AssertionError("short SH vector accepted")
        except ValueError:
            pass

        data = tmp / "data"
        n = sp.generate(str(data), "train_subjects = 1\ntest_subjects = 1\nsequences = 1\nframes = 2\nimage_size = 16\n")
        h, w, px = sp.load_frame(str(data), 0, 0, 1, 0)
        assert (h, w, len(px)) == (16, 16, 16 * 16 * 3)
        g = sp.sobel_gradient_map(px, h, w)
        assert max(abs(v) for v in g) <= 1.0
        print(f"generated {n} files; frame {h}x{w}, mean {sum(px) / len(px):.3f}")
    print("smoke ok")


if __name__ == "__main__":
    main()
