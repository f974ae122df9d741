"""Smoke test for the focusfuse Python module.

Build and install first, e.g.
    maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/focusfuse-*.whl
"""

import math
import tempfile
from pathlib import Path

import focusfuse as ff


def main():
    n = 48
    sharp = ff.textured_image(n, n, 3)
    mask = ff.half_plane_mask(n, n, 0.4)
    i1, i2, gt = ff.make_multifocus_pair(sharp, mask, 2.0)
    assert (i1.width, i1.height) == (n, n)

    pristine = [ff.textured_image(64, 64, 10 + i) for i in range(3)]
    model, curve = ff.Model.random(1).train(pristine, [0.0, 1.0, 2.0, 4.0], epochs=5, seed=2)
    assert len(curve) == 5 and all(math.isfinite(v) for v in curve)

    scores = [ff.score_map(model, img) for img in (i1, i2)]
    assert all(0.0 < lo and hi < 1.0 for lo, hi in (s.min_max() for s in scores))
    masks = ff.pre_estimate(scores)
    conf = ff.confidence_map(scores)
    smooth = ff.solve(masks[0], conf, i1, sigma_xy=4)
    lo, hi = smooth.min_max()
    assert 0.0 <= lo and hi <= 1.0

    result = ff.run_pipeline([i1, i2], model, sigma_xy=4)
    fused = result.fused
    w = [m.to_list() for m in result.weights]
    assert all(abs(a + b - 1.0) < 1e-6 for a, b in zip(*w))

    same = ff.run_pipeline([i1, i1], model).fused
    assert max(abs(a - b) for a, b in zip(same.to_list(), i1.to_list())) < 1e-6

    assert abs(ff.q_nmi(gt, gt, gt) - 2.0) < 1e-6
    assert abs(ff.ncie([gt, gt], gt) - 1.0) < 1e-9
    shifted = ff.Image(n, n, [v * 0.5 + 1.0 for v in gt.to_list()])
    half = ff.Image(n, n, [v * 0.5 for v in gt.to_list()])
    assert abs(ff.psnr(half, shifted) - 48.13) < 0.01
    qg = ff.q_g(i1, i2, fused)
    assert 0.0 <= qg <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        model.save(tmp / "m.qnn")
        # Parameters are stored as f32, so compare file bytes after a round trip.
        ff.Model.load(tmp / "m.qnn").save(tmp / "m2.qnn")
        assert (tmp / "m.qnn").read_bytes() == (tmp / "m2.qnn").read_bytes()
        fused.save_pgm(tmp / "fused.pgm")
        back = ff.Image.load(tmp / "fused.pgm")
        assert (back.width, back.height) == (n, n)
        result.dump(tmp / "dump", [i1, i2])
        assert (tmp / "dump" / "weight_1.f32map").exists()
        try:
            ff.Image.load(tmp / "missing.pgm")
        except OSError:
            pass
        else:
            raise AssertionError("missing file should raise OSError")

    try:
        ff.run_pipeline([i1], model)
    except ValueError:
        pass
    else:
        raise AssertionError("a single source should raise ValueError")

    print(
        f"ok: psnr fused {ff.psnr(fused, gt):.2f} dB, "
        f"sources {ff.psnr(i1, gt):.2f}/{ff.psnr(i2, gt):.2f} dB, q_g {qg:.4f}"
    )


if __name__ == "__main__":
    main()
