import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

import misure
from misure import toy_model
from misure.config import MisureConfig
from misure.harness import samples_from_split
from misure.masks import binarize_prediction
from misure.minimal import find_msr
from misure.sufficient import find_sr
from misure.triangle import generate_triangle_tiny

# reference recipe for the desk-scale runs
TRAIN_N, TRAIN_SEED, EPOCHS, TRAIN_LR = 640, 0, 30, 3e-3
TEST_N, TEST_SEED = 64, 7


def _recipe_key():
    src = Path(toy_model.__file__).read_bytes()
    recipe = f"{TRAIN_N}/{TRAIN_SEED}/{EPOCHS}/{TRAIN_LR}".encode()
    return hashlib.sha256(src + recipe).hexdigest()[:16]


@pytest.fixture(scope="session")
def train_split():
    return generate_triangle_tiny(TRAIN_N, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def trained_model_path(request, train_split):
    """Train the toy model once; later sessions reuse the cached file."""
    cache = Path(request.config.cache.mkdir("misure-toy"))
    path = cache / f"toy-{_recipe_key()}.misu"
    if not path.exists():
        adapter = misure.train_toy_model(misure.ToyModelSpec(), train_split.train, epochs=EPOCHS, lr=TRAIN_LR)
        tmp = path.with_suffix(".part")
        misure.save_model(tmp, adapter.module, adapter.spec,
                          {"image_size": 64, "losses": adapter.history.losses})
        tmp.replace(path)
    return path


@pytest.fixture(scope="session")
def trained_adapter(trained_model_path):
    return misure.load_toy_adapter(trained_model_path, 64)


@pytest.fixture(scope="session")
def test_samples():
    return samples_from_split(generate_triangle_tiny(TEST_N, seed=TEST_SEED, train_fraction=1.0).train)


@dataclass
class TinyRun:
    """SR and MSR for every test image, with per-iteration invariant checks."""
    sr: dict = field(default_factory=dict)
    msr: dict = field(default_factory=dict)
    refs: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    iterations_checked: int = 0
    sr_seconds: float = 0.0
    msr_seconds: float = 0.0


@pytest.fixture(scope="session")
def tiny_run(trained_adapter, test_samples):
    cfg = MisureConfig()
    run = TinyRun()
    for s in test_samples:
        probs = trained_adapter.forward(s.image)
        ref = binarize_prediction(probs, 1)
        if not ref.any():
            continue
        run.refs[s.image_id] = ref
        t0 = time.perf_counter()
        sr = find_sr(trained_adapter, s.image, 1, cfg, probs=probs)
        run.sr_seconds += time.perf_counter() - t0
        support = sr.m_sr > 0

        def check(it, m, image_id=s.image_id, support=support):
            run.iterations_checked += 1
            nz = m[m != 0]
            if nz.size and (nz.min() < cfg.clamp_low or nz.max() > 1.0):
                run.violations.append((image_id, it, "range"))
            if np.any((m != 0) & ~support):
                run.violations.append((image_id, it, "support"))

        t0 = time.perf_counter()
        msr = find_msr(trained_adapter, sr, s.image, 1, cfg, probs=probs, callback=check)
        run.msr_seconds += time.perf_counter() - t0
        run.sr[s.image_id] = sr
        run.msr[s.image_id] = msr
    return run


def _toy_forward(x):
    """Two-class per-pixel model: class-1 logit is a 3x3 box filter of the
    first channel minus 0.4, with zero padding."""
    c = x[0]
    pad = np.pad(c, 1)
    box = sum(pad[dy:dy + c.shape[0], dx:dx + c.shape[1]] for dy in range(3) for dx in range(3)) / 9.0
    z = 8.0 * (box - 0.4)
    p1 = 1.0 / (1.0 + np.exp(-z))
    return np.stack([1 - p1, p1])


def _toy_vjp(x, cot):
    c = x[0]
    pad = np.pad(c, 1)
    box = sum(pad[dy:dy + c.shape[0], dx:dx + c.shape[1]] for dy in range(3) for dx in range(3)) / 9.0
    p1 = 1.0 / (1.0 + np.exp(-8.0 * (box - 0.4)))
    g_box = (cot[1] - cot[0]) * p1 * (1 - p1) * 8.0 / 9.0
    gp = np.pad(g_box, 1)
    g = sum(gp[dy:dy + c.shape[0], dx:dx + c.shape[1]] for dy in range(3) for dx in range(3))
    out = np.zeros_like(x)
    out[0] = g
    return out


@pytest.fixture
def box_adapter():
    """Cheap analytic adapter with an exact hand-written VJP."""
    def make(h=16, w=16, channels=1):
        return misure.FunctionAdapter(_toy_forward, 2, (channels, h, w), vjp_fn=_toy_vjp)
    return make



ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line; repeated in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def emit(name, ok, detail):
        line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        lines.append(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
