"""End-to-end acceptance criteria, one test per criterion.

Each test records a one-line verdict that the terminal summary prints, then
asserts both the numeric check and its wall-clock budget.
"""
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS
from oracles import best_random_rank_r_error, central_difference, exact_rank_matrix, rel_err
from svfit import cli, io, linalg, tasks
from svfit.adapt import make_adapter, trainable_count
from svfit.errors import FormatError
from svfit.model import build_stack, random_weights, stack_backward, stack_forward
from svfit.optim import OptimState, apply_step

pytestmark = pytest.mark.acceptance

ADAPTERS = ("svfit", "lora", "pissa")


def record(key, ok, detail, elapsed, budget):
    in_time = elapsed < budget
    ACCEPTANCE_RESULTS[key] = (ok and in_time, f"{detail} [{elapsed:.2f}s of {budget:g}s]")
    assert ok, detail
    assert in_time, f"took {elapsed:.2f}s, budget {budget}s"


def test_parameter_accounting():
    start = time.perf_counter()
    base = tasks.RunConfig(seed=0, task="blobs", n_blocks=12, d_model=768)
    svfit24 = sum(tasks.count_adapter_params(base.replace(method="svfit", rank=768)).values())
    svfit48 = sum(tasks.count_adapter_params(
        base.replace(method="svfit", rank=768, n_blocks=24)).values())
    lora24 = sum(tasks.count_adapter_params(base.replace(method="lora", rank=8)).values())
    per_matrix = (trainable_count("svfit", 768, 768, 768), trainable_count("lora", 768, 768, 8))
    ratio = svfit24 / lora24
    ok = (svfit24, svfit48, lora24, ratio, per_matrix) == (18_432, 36_864, 294_912, 1 / 16,
                                                           (768, 12_288))
    record("1. parameter accounting", ok,
           f"svfit {svfit24} / {svfit48}, lora {lora24}, ratio 1/{1 / ratio:g}",
           time.perf_counter() - start, 1.0)


def test_eckart_young():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng([7, seed])
        d1, d2 = rng.integers(1, 65), rng.integers(1, 49)
        w = rng.standard_normal((d1, d2))
        f = linalg.svd(w)
        np.testing.assert_allclose(f.sigma, np.linalg.svd(w, compute_uv=False),
                                   rtol=0, atol=1e-12 * f.sigma[0])
        for r in range(1, min(d1, d2) + 1):
            got = np.linalg.norm(w - linalg.rank_r_approx(w, r, factors=f))
            tail = np.sqrt(np.sum(f.sigma[r:] ** 2))
            scale = tail if tail > 0 else np.linalg.norm(w)
            worst = max(worst, abs(got - tail) / scale)
    beaten = 0
    margin = np.inf
    for seed in range(5):
        rng = np.random.default_rng([8, seed])
        w = rng.standard_normal((16, 12))
        f = linalg.svd(w)
        for r in (1, 3, 6):
            ours = np.linalg.norm(w - linalg.rank_r_approx(w, r, factors=f))
            rival = best_random_rank_r_error(w, r, 1000, rng)
            beaten += ours < rival
            margin = min(margin, rival - ours)
    ok = worst <= 1e-10 and beaten == 15
    record("2. eckart-young", ok,
           f"worst tail-identity rel err {worst:.2e}; best rank-r beat 1000 random fits in "
           f"{beaten}/15 cases (min margin {margin:.3g})",
           time.perf_counter() - start, 30.0)


def test_subspace_annihilation():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng([9, seed])
        d1, d2 = rng.integers(2, 41), rng.integers(2, 41)
        k = int(rng.integers(1, min(d1, d2)))
        w = exact_rank_matrix(rng, d1, d2, k)
        sub = linalg.split_subspaces(linalg.svd(w), k)
        norm = np.linalg.norm(w)
        worst = max(worst, np.abs(w @ sub.v_e).max() / norm, np.abs(w.T @ sub.u_e).max() / norm)
    record("3. subspace annihilation", worst <= 1e-10,
           f"max |W v_e|, |W^T u_e| over ||W||_F = {worst:.2e} across 50 seeds",
           time.perf_counter() - start, 10.0)


def test_init_equivalence():
    start = time.perf_counter()
    worst = dict.fromkeys(ADAPTERS, 0.0)
    for seed in range(100):
        rng = np.random.default_rng([10, seed])
        d1, d2 = rng.integers(1, 33), rng.integers(1, 33)
        w = rng.standard_normal((d1, d2))
        x = rng.standard_normal((d2, int(rng.integers(1, 9))))
        r = int(rng.integers(1, min(d1, d2) + 1))
        dense = w @ x
        f = linalg.svd(w)
        for method in ADAPTERS:
            out = make_adapter(method, w, r, seed=seed, factors=f).forward(x)
            worst[method] = max(worst[method], rel_err(out, dense))
    ok = max(worst.values()) <= 1e-10
    record("4. init equivalence", ok,
           ", ".join(f"{m} {e:.1e}" for m, e in worst.items()) + " (max rel err, 100 pairs)",
           time.perf_counter() - start, 10.0)


def _train_layer(method, seed):
    rng = np.random.default_rng([11, seed])
    w = rng.standard_normal((12, 10))
    layer = make_adapter(method, w, 4, seed=seed)
    target = w + 0.3 * rng.standard_normal(w.shape)
    state = OptimState(kind="adamw", lr_base=0.01)
    for _ in range(50):
        x = rng.standard_normal((10, 16))
        g = layer.forward(x) - target @ x
        apply_step(state, layer.trainable, layer.backward(x, g / x.shape[1]).params)
    return layer, rng


def test_merge_equivalence(tmp_path):
    start = time.perf_counter()
    worst = {}
    for method in ("svfit", "lora", "pissa", "full"):
        layer, rng = _train_layer(method, 0)
        merged = layer.merge()
        probes = rng.standard_normal((layer.d2, 50))
        worst[method] = float(np.abs(layer.forward(probes) - merged @ probes).max())
    # whole stacks: 50 steps, then the CLI merge path
    for method in ADAPTERS:
        cfg = tasks.RunConfig(seed=1, task="blobs", method=method, rank=4, d_model=8,
                              n_train=100, batch_size=20, epochs=10, pretrain_steps=20,
                              out_dir=str(tmp_path / method))
        res = tasks.run_training(cfg)
        assert res.final.step == 50
        _, gap = cli.merge_checkpoint(io.read_checkpoint(res.checkpoint_path), seed=3)
        worst[f"{method} stack"] = gap
    ok = max(worst.values()) <= 1e-9
    record("5. merge equivalence", ok,
           "max abs gap " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()),
           time.perf_counter() - start, 30.0)


def _layer_fd(method, seed):
    rng = np.random.default_rng([12, seed])
    w = rng.standard_normal((7, 6))
    layer = make_adapter(method, w, 3, seed=seed)
    for buf in layer.trainable.values():
        buf += 0.1 * rng.standard_normal(buf.shape)
    x = rng.standard_normal((6, 5))
    y = rng.standard_normal((7, 5))

    def loss():
        return 0.5 * np.sum((layer.forward(x) - y) ** 2)

    grads = layer.backward(x, layer.forward(x) - y)
    errs = {name: rel_err(grads.params[name], central_difference(loss, buf))
            for name, buf in layer.trainable.items()}
    errs["input"] = rel_err(grads.d_input, central_difference(loss, x))
    return errs


def _stack_fd(method, seed):
    rng = np.random.default_rng([13, seed])
    stack = build_stack(random_weights(seed, 2, 16), method, 4, seed=seed, classes=3)
    for buf in stack.trainable_buffers().values():
        buf += 0.05 * rng.standard_normal(buf.shape)
    x = rng.standard_normal((2, 3, 16))
    target = rng.standard_normal((2, 3))

    def loss():
        out, _ = stack_forward(stack, x)
        return 0.5 * np.sum((out - target) ** 2)

    out, trace = stack_forward(stack, x)
    grads, dx = stack_backward(stack, trace, out - target)
    errs = {name: rel_err(grads[name], central_difference(loss, buf))
            for name, buf in stack.trainable_buffers().items()}
    errs["input"] = rel_err(dx, central_difference(loss, x))
    return errs


def test_gradient_correctness():
    start = time.perf_counter()
    layer_worst, stack_worst = {}, {}
    for method in ("svfit", "lora", "pissa", "full", "frozen"):
        for name, e in _layer_fd(method, 0).items():
            layer_worst[name] = max(layer_worst.get(name, 0.0), e)
        for name, e in _stack_fd(method, 1).items():
            key = name.rsplit(".", 1)[-1]
            stack_worst[key] = max(stack_worst.get(key, 0.0), e)
    covered = {"sigma_r", "a", "b", "w", "head", "input"}
    ok = (covered <= set(layer_worst) | set(stack_worst)
          and max(layer_worst.values()) <= 1e-5 and max(stack_worst.values()) <= 1e-4)
    record("6. gradient correctness", ok,
           "layer " + ", ".join(f"{k} {v:.1e}" for k, v in sorted(layer_worst.items()))
           + "; end-to-end " + ", ".join(f"{k} {v:.1e}" for k, v in sorted(stack_worst.items())),
           time.perf_counter() - start, 60.0)


def test_teacher_student(tmp_path):
    start = time.perf_counter()
    cfg = tasks.RunConfig(seed=0, task="teacher_student", method="svfit", rank="full",
                          d_model=16, perturb="sigma_only", n_train=256, batch_size=32,
                          epochs=250, log_every=100, out_dir=str(tmp_path))
    res = tasks.run_training(cfg)
    initial, final = res.records[0].train_loss, res.final.train_loss
    # independent check against the known target weight
    data = tasks.gen_teacher_student(cfg.seed, 16, 16, 16, "sigma_only", cfg.perturb_scale)
    merged = io.read_checkpoint(res.checkpoint_path)
    layer = make_adapter("svfit", data.w0, 16)
    layer.trainable["sigma_r"][:] = merged["layer.svfit.sigma_r"]
    weight_gap = np.abs(layer.merge() - data.w_star).max()
    ok = res.final.step <= 2000 and final <= 1e-4 * initial and weight_gap < 1e-3
    record("7. teacher-student", ok,
           f"mse {initial:.3e} -> {final:.3e} in {res.final.step} steps "
           f"(ratio {final / initial:.1e}), max |W - W*| {weight_gap:.1e}",
           time.perf_counter() - start, 60.0)


def test_figure_reproduction():
    start = time.perf_counter()
    img = tasks.load_test_image()
    f = linalg.svd(img.pixels)
    ranks = (8, 16, 32, 64, 128, 256)
    top = [tasks.reconstruct_image(img, r, "top", f).psnr for r in ranks]
    bottom = [tasks.reconstruct_image(img, r, "bottom", f).psnr for r in ranks]
    increasing = all(b > a for a, b in zip(top, top[1:]))
    dominant = all(t > b for t, b, r in zip(top, bottom, ranks) if r < 256)
    nuclear, frob = linalg.energy_ratio(f.sigma, 26)
    ok = increasing and dominant and frob >= 0.95
    record("8. figure reproduction", ok,
           f"psnr top {[round(p, 1) for p in top]} vs bottom "
           f"{[round(p, 1) for p in bottom]}; r=26 frobenius {frob:.4f} "
           f"({'meets' if frob >= 0.99 else 'misses'} 0.99), nuclear {nuclear:.4f}",
           time.perf_counter() - start, 30.0)


def test_determinism(tmp_path, capsys):
    start = time.perf_counter()
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"seed": 5, "task": "blobs", "method": "svfit", "rank": 8,
                                  "d_model": 16, "epochs": 4, "pretrain_steps": 100}))
    codes, blobs = [], []
    for name in ("first", "second"):
        out = tmp_path / name
        codes.append(cli.main(["train", "--config", str(config), "--out-dir", str(out)]))
        blobs.append(((out / "metrics.jsonl").read_bytes(), (out / "final.svfc").read_bytes()))
    capsys.readouterr()
    ok = codes == [0, 0] and blobs[0] == blobs[1]
    record("9. determinism", ok,
           f"metrics {len(blobs[0][0])} B and checkpoint {len(blobs[0][1])} B "
           f"{'identical' if blobs[0] == blobs[1] else 'differ'} across two runs",
           time.perf_counter() - start, 120.0)


def _random_tensor(rng):
    shape = tuple(int(n) for n in rng.integers(1, 7, size=2))
    return rng.standard_normal(shape) * 10.0 ** rng.integers(-5, 6)


def _detected(fn, data):
    try:
        fn(data)
    except FormatError:
        return True
    return False


def test_io_integrity():
    start = time.perf_counter()
    rng = np.random.default_rng(14)
    failures = {"matrix": 0, "checkpoint": 0, "pgm": 0}
    missed = {"matrix": 0, "checkpoint": 0, "pgm": 0}
    decode_matrix = lambda b: io.decode_matrix(b)  # noqa: E731
    for _ in range(1000):
        m = rng.standard_normal(tuple(int(n) for n in rng.integers(1, 9, size=2)))
        raw = io.encode_matrix(m)
        back, end = io.decode_matrix(raw)
        failures["matrix"] += not (end == len(raw) and back.tobytes() == m.tobytes())
        cut = int(rng.integers(0, len(raw)))
        missed["matrix"] += not _detected(decode_matrix, raw[:cut])
        bad = bytearray(raw)
        bad[int(rng.integers(0, 4))] ^= 1 << int(rng.integers(0, 8))
        missed["matrix"] += not _detected(decode_matrix, bytes(bad))

        tensors = {f"t{i}.{rng.integers(1000)}": _random_tensor(rng)
                   for i in range(int(rng.integers(0, 5)))}
        raw = io.encode_checkpoint(tensors)
        back = io.decode_checkpoint(raw)
        failures["checkpoint"] += not (
            list(back) == list(tensors)
            and all(back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
                    for k, v in tensors.items()))
        bad = bytearray(raw)
        bad[int(rng.integers(0, len(raw)))] ^= 1 << int(rng.integers(0, 8))
        missed["checkpoint"] += not _detected(io.decode_checkpoint, bytes(bad))
        missed["checkpoint"] += not _detected(io.decode_checkpoint,
                                              raw[:int(rng.integers(0, len(raw)))])

        h, w = (int(n) for n in rng.integers(1, 17, size=2))
        img = io.GrayImage(rng.integers(0, 256, size=(h, w)) / 255.0)
        raw = io.encode_pgm(img)
        back = io.decode_pgm(raw)
        failures["pgm"] += not np.array_equal(back.pixels, img.pixels)
        missed["pgm"] += not _detected(io.decode_pgm, raw[:int(rng.integers(0, len(raw)))])
    ok = not any(failures.values()) and not any(missed.values())
    record("10. io integrity", ok,
           f"1000 round-trips per format, failures {failures}, undetected corruptions {missed}",
           time.perf_counter() - start, 10.0)
