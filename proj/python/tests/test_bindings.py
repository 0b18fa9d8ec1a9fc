import math

import numpy as np
import pytest

ett = pytest.importorskip("ett_lab")

TINY = {
    "data.count": "32",
    "run.record_wall_time": "false",
    "model.patch": "8",
    "model.hidden": "16",
    "model.blocks": "1",
    "model.code_dim": "8",
    "model.disc_hidden": "8",
    "model.codebook_size": "32",
    "model.width": "16",
    "model.layers": "1",
    "model.heads": "2",
    "model.projector_hidden": "16",
    "pretrain.steps": "3",
    "pretrain.batch_size": "2",
    "stage1.steps": "3",
    "stage1.batch_size": "2",
}


def test_samples_are_deterministic():
    a, cap_a = ett.generate_sample(3, 5)
    b, cap_b = ett.generate_sample(3, 5)
    assert a.shape == (32, 32, 3)
    assert a.dtype == np.float32
    assert np.array_equal(a, b)
    assert cap_a == cap_b
    assert ett.caption_roundtrips(cap_a)
    assert np.array_equal(ett.render_caption(cap_a), a)


def test_psnr_and_settings():
    assert math.isinf(ett.psnr_from_mse(0.0))
    assert ett.psnr_from_mse(4.0) == pytest.approx(0.0)
    s = ett.default_settings()
    assert s["stage2.alpha"] == "0.25"
    assert s["loss.lambda_gan"] == "0.1"


def test_verifier_on_truth_and_blank():
    caps = [ett.generate_sample(0, i)[1] for i in range(6)]
    truth = np.stack([ett.render_caption(c) for c in caps])
    assert ett.geneval_score(caps, truth)["overall"] == 1.0
    blank = np.stack([np.full_like(img, img[0, 0, 0]) for img in truth])
    assert ett.geneval_score(caps, blank)["overall"] == 0.0


def test_gradcheck_from_python():
    assert "matmul" in ett.gradcheck_ops()
    r = ett.gradcheck("matmul", 0)
    assert r["passed"]
    assert r["max_rel_error"] < 1e-4


def test_train_and_load(tmp_path):
    settings = {**TINY, "run.out_dir": str(tmp_path)}
    pre = ett.run_stage("pretrain-tokenizer", settings)
    assert pre["steps_done"] == 3
    s1 = ett.run_stage("stage1", settings)
    changed = [g for g, h in s1["hashes_after"].items() if s1["hashes_before"][g] != h]
    assert changed == ["projector"]
    assert ett.run_stage("stage1", settings)["skipped"]

    model = ett.Model(settings, s1["checkpoint"])
    assert model.stage == "stage1"
    assert model.group_hashes() == s1["hashes_after"]
    imgs = np.stack([ett.generate_sample(0, i)[0] for i in range(2)])
    out = model.reconstruct(imgs)
    assert out.shape == imgs.shape
    assert np.all(np.abs(out) <= 1.0)
    m = model.recon_metrics(limit=4)
    assert m["psnr"] == pytest.approx(10 * math.log10(4 / m["mse"]))


def test_errors_surface_as_exceptions(tmp_path):
    with pytest.raises(ett.EttError):
        ett.run_stage("stage2", {**TINY, "run.out_dir": str(tmp_path)})
    with pytest.raises(ett.EttError):
        ett.run_stage("stage1", {"no.such.key": "1"})
    with pytest.raises(ValueError):
        ett.run_stage("stage9")
