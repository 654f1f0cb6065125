"""Smoke test for the `kspace` extension module.

Build and run:

    pip install maturin
    maturin develop -m crates/python/Cargo.toml
    python python/smoke_test.py

or copy `target/<profile>/libkspace.so` to `kspace.abi3.so` on the Python path.
"""

import math
import os
import tempfile

import kspace


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    h = w = 16

    re = [float((i * 7) % 5) for i in range(h * w)]
    im = [0.0] * (h * w)
    sre, sim = kspace.fft2(re, im, h, w)
    energy = sum(x * x for x in re)
    assert abs(sum(a * a + b * b for a, b in zip(sre, sim)) - energy) < 1e-9 * energy
    back_re, back_im = kspace.ifft2(sre, sim, h, w)
    assert close(back_re, re, 1e-12) and close(back_im, im, 1e-12)

    mask = kspace.Mask.uniform(h, w, 4.0)
    assert mask.kind == "uniform"
    assert len(mask.bits()) == h * w and mask.count > 0
    assert abs(mask.acceleration - h * w / mask.count) < 1e-12
    gmask = kspace.Mask.gaussian(h, w, 3.0, seed=5)
    assert gmask.bits() == kspace.Mask.gaussian(h, w, 3.0, seed=5).bits()

    phantom = kspace.Phantom(h, w, seed=1, index=0)
    mag = phantom.magnitude()
    assert max(mag) <= 1.0 + 1e-12 and len(mag) == h * w
    assert phantom.spectrum == kspace.fft2(*phantom.image, h, w)
    assert math.isinf(kspace.psnr(mag, mag))
    assert abs(kspace.ssim(mag, mag, h, w) - 1.0) < 1e-12

    cost = kspace.attention_cost(m=4096, n=819, l=256, d=256, lr_layers=4, hr_layers=6, standard_layers=10)
    assert cost["hierarchical"] < cost["standard"]

    config = """
[model]
hr_grid = [16, 16]
lr_grid = [4, 4]
d = 16
n_heads = 2
n_enc = 1
n_lr = 1
n_hr = 2
refine_channels = 4
data_consistency = true

[train]
epochs = 2
"""
    model = kspace.Model(config, seed=0)
    assert model.num_parameters > 0 and model.step == 0
    data = [kspace.Phantom(h, w, seed=1, index=i) for i in range(3)]
    losses = model.train(data)
    assert len(losses) == 6 and all(math.isfinite(x) for x in losses)
    assert model.step == 6

    out = model.reconstruct(phantom, mask)
    assert len(out["layer_images"]) == 2
    assert len(out["image"][0]) == h * w

    report = model.evaluate(data[:2], mask)
    assert set(report) >= {"psnr", "ssim", "zero_filled_psnr", "zero_filled_ssim", "layer_psnr"}

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = kspace.Model.load(path)
        assert again.step == model.step
        assert again.reconstruct(phantom, mask)["image"] == out["image"]
        mpath = os.path.join(tmp, "mask.grid")
        mask.save(mpath)
        assert kspace.Mask.load(mpath).bits() == mask.bits()
        ppath = os.path.join(tmp, "phantom.grid")
        phantom.save(ppath)
        assert kspace.Phantom.load(ppath).image == phantom.image

    try:
        kspace.Mask.uniform(0, w, 2.0)
    except ValueError:
        pass
    else:
        raise AssertionError("zero-height mask accepted")

    print("kspace smoke test: ok", repr(model), repr(mask))


if __name__ == "__main__":
    main()
