import numpy as np
import pytest

from adaptive_attention.data import Example, build_vocab, make_batches
from adaptive_attention.model import ModelConfig, ModelParams
from adaptive_attention.synthetic import generate_corpus


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f(x)``, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, out = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_corpus(64, seed=7)


@pytest.fixture(scope="session")
def toy_vocab(toy_corpus):
    return build_vocab(toy_corpus)


def micro_params(vocab_size=20, d=8, s=8, raw=8, max_steps=4, epsilon=0.01, seed=0, **kw):
    cfg = ModelConfig(
        vocab_size=vocab_size, raw_embed_dim=raw, embed_dim=d, state_dim=s,
        dropout_rate=kw.pop("dropout_rate", 0.0), epsilon=epsilon, max_steps=max_steps, **kw,
    )
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, 1.0, (vocab_size, raw))
    emb[0] = 0.0
    return ModelParams.init(cfg, emb, rng)


@pytest.fixture
def micro(toy_corpus, toy_vocab):
    params = micro_params(vocab_size=len(toy_vocab))
    params.vocab = toy_vocab
    return params


def toy_batch(examples, vocab, size=None):
    return make_batches(examples[:size] if size else examples, vocab, len(examples[:size] if size else examples))[0]


# Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary.
_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        detail = ""
        if rep.failed:
            text = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
            detail = text.splitlines()[0][:160]
        _ACCEPTANCE[number] = (status, title, f"{rep.duration:.1f}s" + (f"  {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, info = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number:>2}: {title} ({info})")
