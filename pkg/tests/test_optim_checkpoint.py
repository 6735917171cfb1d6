"""AdamW update rule and checkpoint round-trips."""

import numpy as np
import pytest

from voxdistill import autodiff as ad
from voxdistill.autodiff import Tape, backward
from voxdistill.checkpoint import load_params, save_params
from voxdistill.errors import CheckpointError, ContractError
from voxdistill.optim import AdamW, ParamStore


def _store(**kw):
    s = ParamStore()
    for k, v in kw.items():
        s.add(k, v)
    return s


class TestAdamW:
    def test_zero_grad_zero_decay_is_noop(self):
        s = _store(w=np.array([1.0, -2.0]))
        opt = AdamW(s, lr=0.1, weight_decay=0.0)
        opt.step({"w": np.zeros(2)})
        assert np.array_equal(s["w"], [1.0, -2.0])

    def test_descent_on_square(self):
        s = _store(w=np.array(1.0))
        opt = AdamW(s, lr=1e-3, weight_decay=0.0)
        opt.step({"w": np.array(2.0)})  # grad of w^2 at w=1
        assert 0.0 < s["w"] < 1.0

    def test_matches_reference_transcript(self):
        # Independent step-by-step AdamW implementation, two variables, 3 steps.
        lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.01
        w = np.array([1.0, -3.0])
        m = np.zeros(2)
        v = np.zeros(2)
        ref = w.copy()
        refs = []
        for t in range(1, 4):
            g = 2.0 * ref  # gradient of sum(w^2)
            ref = ref - lr * wd * ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            ref = ref - lr * mhat / (np.sqrt(vhat) + eps)
            refs.append(ref.copy())

        s = _store(w=np.array([1.0, -3.0]))
        opt = AdamW(s, lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
        for t in range(3):
            opt.step({"w": 2.0 * s["w"]})
            assert np.allclose(s["w"], refs[t], atol=1e-15), t

    def test_shape_mismatch(self):
        s = _store(w=np.ones(3))
        opt = AdamW(s, lr=0.1)
        with pytest.raises(ContractError):
            opt.step({"w": np.ones(2)})

    def test_missing_grad(self):
        s = _store(w=np.ones(3))
        opt = AdamW(s, lr=0.1)
        with pytest.raises(ContractError):
            opt.step({})

    def test_decoupled_decay_applied_without_grad_signal(self):
        s = _store(w=np.array([10.0]))
        opt = AdamW(s, lr=0.1, weight_decay=0.5)
        opt.step({"w": np.zeros(1)})
        assert np.isclose(s["w"][0], 10.0 * (1 - 0.1 * 0.5))


class TestBinding:
    def test_bind_and_collect(self):
        s = _store(a=np.array([1.0, 2.0]), b=np.array([[3.0]]))
        tape = Tape()
        bound = s.bind(tape)
        loss = ad.reduce_sum(ad.mul(bound["a"], bound["a"]))
        grads = bound.collect_grads(backward(tape, loss))
        assert np.allclose(grads["a"], [2.0, 4.0])
        assert np.array_equal(grads["b"], np.zeros((1, 1)))

    def test_frozen_bind_records_nothing(self):
        s = _store(a=np.ones(2))
        bound = s.bind(None)
        out = ad.mul(bound["a"], bound["a"])
        assert out.tape is None


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        s = _store(**{"layer.w": rng.normal(size=(3, 4)),
                      "layer.b": rng.normal(size=4),
                      "scalar": np.array(2.5)})
        path = tmp_path / "p.ckpt"
        save_params(s, path)
        loaded = load_params(path)
        assert loaded.names() == s.names()
        assert s.allclose(loaded)

    def test_layout_is_little_endian_f64(self, tmp_path):
        s = _store(x=np.array([1.0]))
        path = tmp_path / "p.ckpt"
        save_params(s, path)
        blob = path.read_bytes()
        assert blob[:4] == b"VXCK"
        # version=1, count=1, name_len=1, 'x', rank=1, dim=1, payload 1.0
        assert blob[4:8] == (1).to_bytes(4, "little")
        assert blob[8:12] == (1).to_bytes(4, "little")
        assert blob[12:16] == (1).to_bytes(4, "little")
        assert blob[16:17] == b"x"
        assert np.frombuffer(blob[25:33], dtype="<f8")[0] == 1.0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(CheckpointError):
            load_params(path)
