"""Smoke test for the `fpcm` extension module.

Build and install first:

    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/fpcm-*.whl
    python python/smoke_test.py
"""

import math
import os
import tempfile

import fpcm


def close(a, b, tol):
    return abs(a - b) <= tol


def check_spectral():
    h, w = 8, 8
    x = fpcm.Tensor([math.cos(2 * math.pi * (a + 2 * b) / 8) for a in range(h) for b in range(w)], [1, h, w])
    re, im = fpcm.dft2(x)
    assert re.shape == [1, h, w]
    # A single cosine puts half its energy in bin (1, 2) and half in its mirror.
    assert close(re.data[1 * w + 2], h * w / 2, 1e-9)
    assert max(abs(v) for v in im.data) < 1e-9

    filt = fpcm.make_filter(h, w, 0.5)
    assert filt.data[0] == 1.0
    assert all(0.0 < v <= 1.0 for v in filt.data)

    low, high = fpcm.band_split(x, 0.25)
    recon = [a + b for a, b in zip(low.data, high.data)]
    assert max(abs(a - b) for a, b in zip(recon, x.data)) < 1e-9
    assert fpcm.high_freq_norm(x, 0.125) >= fpcm.high_freq_norm(x, 0.5)

    half = fpcm.fpcm_forward(x, 0.5, 0.25)
    assert max(abs(a - 0.5 * b) for a, b in zip(half.data, x.data)) < 1e-9
    ident = fpcm.fpcm_forward(x, 1.0, 0.25, kind="allpass")
    assert ident.max_abs_diff(x) < 1e-12


def check_formulas():
    assert fpcm.cutoff_schedule(0, 20) == 0.5
    assert fpcm.cutoff_schedule(20, 20) == 0.125
    assert fpcm.format_percent(fpcm.w_robust(0.8515, 0.5518, 0.5, 0.5)) == "70.17"


def check_errors():
    try:
        fpcm.Tensor([1.0, 2.0], [3])
    except fpcm.ShapeError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")
    try:
        fpcm.Config(overrides=["train.bogus=1"])
    except fpcm.ConfigError as e:
        assert "train.bogus" in str(e)
    else:
        raise AssertionError("unknown key accepted")
    assert issubclass(fpcm.ConfigError, fpcm.FpcmError)


def check_model():
    cfg = fpcm.Config(
        """
        seed = 1
        [data]
        synth_classes = 4
        synth_train_per_class = 8
        synth_test_per_class = 5
        synth_side = 8
        [model]
        channels = [4, 8, 8]
        [train]
        epochs = 2
        batch_size = 8
        [attack]
        train_steps = 2
        eval_steps = 3
        """
    )
    train = cfg.load_data("train")
    test = cfg.load_data("test")
    assert len(train) == 32 and len(test) == 20

    model = fpcm.Model(cfg)
    assert model.fpcm_count() == 3
    assert model.fpcm_param_count() == 9
    log = model.train(train, cfg)
    assert [r["epoch"] for r in log] == [0, 1]
    assert log[0]["beta"] == 0.5
    assert model.beta == fpcm.EVAL_BETA

    clean, robust = model.evaluate(test, cfg)
    assert 0.0 <= robust <= clean <= 1.0

    x = test.head(4).images
    logits = model.logits(x)
    assert logits.shape == [4, 4]
    assert len(model.predict(x)) == 4
    for _, _, alpha in model.alphas(x):
        assert all(0.5 <= a <= 1.0 for a in alpha.data)

    labels = test.head(4).labels
    adv = fpcm.pgd(model, x, labels, steps=3, seed=2)
    assert adv.max_abs_diff(x) <= 8 / 255 + 1e-12
    assert all(0.0 <= v <= 1.0 for v in adv.data)
    step = fpcm.fgsm(model, x, labels, 0.0)
    assert step.max_abs_diff(x) == 0.0

    profile = fpcm.layer_freq_profile(model, x)
    assert len(profile) == 7
    sweep = fpcm.freq_noise_sweep(model, test, [0.5, 0.125], draws=1)
    assert [b for b, _ in sweep] == [0.125, 0.5]
    assert sweep == fpcm.freq_noise_sweep(model, test, [0.5, 0.125], draws=1)
    stats = fpcm.alpha_stats(model, x)
    assert len(stats) == 3

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.fpcm")
        model.save(path, epoch=2, seed=1)
        again = fpcm.Model.load(path)
        assert again.logits(x).data == logits.data
        with open(path, "r+b") as f:
            f.seek(40)
            byte = f.read(1)
            f.seek(40)
            f.write(bytes([byte[0] ^ 0xFF]))
        try:
            fpcm.Model.load(path)
        except fpcm.FormatError:
            pass
        else:
            raise AssertionError("corrupted checkpoint loaded")


def main():
    check_spectral()
    check_formulas()
    check_errors()
    check_model()
    print("smoke test passed")


if __name__ == "__main__":
    main()
