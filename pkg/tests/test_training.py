import math
import numpy as np
import pytest

from adaptive_attention.act import HaltingRecord
from adaptive_attention.data import build_vocab, make_batch
from adaptive_attention.errors import ConfigurationError, InputError, TrainingDivergedError
from adaptive_attention.evaluation import evaluate
from adaptive_attention.model import forward
from adaptive_attention.synthetic import generate_corpus, write_random_vectors
from adaptive_attention.tensor import Tensor
from adaptive_attention.training import (
    REFERENCE_GRID,
    OptimizerState,
    TrainConfig,
    clip_gradients,
    compute_loss,
    cross_entropy,
    expand_grid,
    grid_search,
    optimizer_step,
    read_metrics_csv,
    train,
    train_epoch,
    write_metrics_csv,
)

from conftest import micro_params, toy_batch


class Bag:
    """Minimal parameter container exposing the optimiser interface."""

    def __init__(self, **arrays):
        self.tensors = {k: Tensor(np.asarray(v, dtype=float), requires_grad=True) for k, v in arrays.items()}

    def items(self):
        return self.tensors.items()


def small(**kw) -> TrainConfig:
    base = dict(embed_dim=8, state_dim=8, raw_embed_dim=8, batch_size=16, max_steps=4, max_epochs=2, eval_batch_size=64)
    base.update(kw)
    return TrainConfig(**base)


def _record(n, r):
    return HaltingRecord([], [], n, r, Tensor(r))


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(160, seed=3), generate_corpus(60, seed=4)


class TestLoss:
    def test_uniform_logits(self, micro):
        logits = Tensor(np.zeros((2, 3)))
        for labels in ([0, 1], [2, 2]):
            ce = cross_entropy(logits, np.array(labels))
            assert ce.item() == pytest.approx(math.log(3), abs=1e-15)

    def test_bad_labels(self):
        with pytest.raises(InputError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(InputError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))

    def test_ponder_mean(self, micro):
        terms = compute_loss(Tensor(np.zeros((2, 3))), np.array([0, 1]), [_record(3, 0.2), _record(1, 1.0)], micro, small())
        assert terms.ponder.item() == pytest.approx(2.6, abs=1e-12)

    def test_decomposition(self, micro, toy_corpus):
        cfg = small(ponder_weight=0.37, l2_weight=0.01)
        batch = make_batch(toy_corpus[:6], micro.vocab)
        out = forward(batch, micro)
        t = compute_loss(out.logits, batch.labels, out.records, micro, cfg).as_floats()
        assert t["total"] == pytest.approx(t["cross_entropy"] + 0.37 * t["ponder"] + 0.01 * t["l2"], abs=1e-12)

    def test_l2_counts_only_matrices(self, micro):
        expected = sum(float((micro[n].data ** 2).sum()) for n in micro if micro[n].ndim == 2)
        terms = compute_loss(Tensor(np.zeros((1, 3))), np.array([0]), [_record(1, 1.0)], micro, small())
        assert terms.l2.item() == pytest.approx(expected, rel=1e-12)
        assert "halt.w" not in micro.weight_names() and "cls.b" not in micro.weight_names()

    def test_zero_ponder_weight_ignores_halting(self, toy_corpus, toy_vocab):
        batch = make_batch(toy_corpus[:6], toy_vocab)
        totals = []
        for bias in (-3.0, 30.0):
            p = micro_params(vocab_size=len(toy_vocab), max_steps=1, halt_bias=bias)
            out = forward(batch, p)
            totals.append(compute_loss(out.logits, batch.labels, out.records, p, small(ponder_weight=0.0)).total.item())
        assert totals[0] == totals[1]


class TestClip:
    def test_examples(self):
        bag = Bag(w=[0.0, 0.0, 0.0])
        bag.tensors["w"].grad = np.array([7.3, -12.0, 4.9])
        clip_gradients(bag, 5.0)
        assert bag.tensors["w"].grad.tolist() == [5.0, -5.0, 4.9]

    def test_bound_holds(self, rng):
        bag = Bag(a=np.zeros((4, 4)), b=np.zeros(3))
        for t in bag.tensors.values():
            t.grad = rng.normal(scale=20, size=t.shape)
        clip_gradients(bag, 5.0)
        assert max(np.abs(t.grad).max() for t in bag.tensors.values()) <= 5.0


class TestOptimizers:
    def test_adagrad_first_and_second_step(self):
        bag = Bag(w=[0.0])
        state = OptimizerState.create(bag, "adagrad")
        bag.tensors["w"].grad = np.array([1.0])
        optimizer_step(bag, state, 0.01)
        first = bag.tensors["w"].data[0]
        assert first == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-15)
        optimizer_step(bag, state, 0.01)
        second = bag.tensors["w"].data[0] - first
        assert abs(second) < abs(first)
        assert second == pytest.approx(-0.01 / (math.sqrt(2) + 1e-8), abs=1e-15)

    def test_adam_first_step(self):
        bag = Bag(w=[0.0])
        state = OptimizerState.create(bag, "adam")
        bag.tensors["w"].grad = np.array([0.3])
        optimizer_step(bag, state, 0.01)
        # bias-corrected moments equal g and g^2 on the first step
        assert bag.tensors["w"].data[0] == pytest.approx(-0.01 * 0.3 / (0.3 + 1e-8), abs=1e-15)

    @pytest.mark.parametrize("kind", ["adagrad", "adam"])
    def test_zero_gradient_is_identity(self, kind, rng):
        bag = Bag(a=rng.normal(size=(3, 2)), b=rng.normal(size=2))
        before = {k: t.data.copy() for k, t in bag.items()}
        state = OptimizerState.create(bag, kind)
        for _ in range(3):
            for t in bag.tensors.values():
                t.grad = np.zeros_like(t.data)
            optimizer_step(bag, state, 0.5)
        for k, t in bag.items():
            assert np.array_equal(t.data, before[k])

    def test_adagrad_accumulators_nondecreasing(self, rng):
        bag = Bag(a=np.zeros(5))
        state = OptimizerState.create(bag, "adagrad")
        prev = state.accumulators["a"].copy()
        for _ in range(5):
            bag.tensors["a"].grad = rng.normal(size=5)
            optimizer_step(bag, state, 0.1)
            acc = state.accumulators["a"]
            assert np.all(acc >= prev) and np.all(acc >= 0)
            prev = acc.copy()

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            OptimizerState.create(Bag(a=[1.0]), "sgd")


class TestConfig:
    def test_defaults_are_best_grid_cell(self):
        cfg = TrainConfig()
        assert (cfg.ponder_weight, cfg.learning_rate, cfg.dropout, cfg.embed_dim, cfg.batch_size, cfg.epsilon) == (
            0.001, 0.01, 0.2, 200, 32, 0.01,
        )
        assert cfg.clip_threshold == 5.0 and cfg.max_epochs == 15 and cfg.patience == 5

    def test_defaults_lie_in_grid(self):
        cfg = TrainConfig()
        for key, values in REFERENCE_GRID.items():
            assert getattr(cfg, key) in values
        assert len(expand_grid(REFERENCE_GRID)) == 4 * 3 * 2 * 3 * 3 * 2

    @pytest.mark.parametrize("kw", [{"ponder_weight": -1}, {"clip_threshold": 0}, {"learning_rate": 0}, {"optimizer": "sgd"}])
    def test_validation(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)

    def test_from_mapping(self):
        cfg = TrainConfig.from_mapping({"learning_rate": "0.05", "batch_size": "8", "optimizer": "adam", "patience": "none"})
        assert cfg.learning_rate == 0.05 and cfg.batch_size == 8 and cfg.optimizer == "adam" and cfg.patience is None
        with pytest.raises(ConfigurationError):
            TrainConfig.from_mapping({"nonsense": "1"})


class TestTraining:
    def test_embedding_frozen(self, corpus):
        train_set, val_set = corpus
        result = train(train_set, val_set, small(max_epochs=1))
        before = result.params.embedding.copy()
        assert np.array_equal(result.final_params.embedding, before)
        assert not result.final_params.embedding.flags.writeable

    def test_embedding_untouched_by_steps(self, micro, toy_corpus):
        before = micro.embedding.copy()
        state = OptimizerState.create(micro, "adagrad")
        train_epoch(micro, [toy_batch(toy_corpus, micro.vocab, 16)], state, small(dropout=0.0), np.random.default_rng(0))
        assert np.array_equal(micro.embedding, before)

    def test_same_seed_same_metrics(self, corpus, tmp_path):
        train_set, val_set = corpus
        logs = []
        for run in range(2):
            res = train(train_set, val_set, small(seed=5))
            path = tmp_path / f"m{run}.csv"
            write_metrics_csv(res.history, path)
            logs.append(path.read_bytes())
        assert logs[0] == logs[1]
        assert read_metrics_csv(tmp_path / "m0.csv") == res.history

    def test_different_seed_differs(self, corpus):
        train_set, val_set = corpus
        a = train(train_set, val_set, small(seed=1, max_epochs=1)).history
        b = train(train_set, val_set, small(seed=2, max_epochs=1)).history
        assert a != b

    def test_best_epoch_selected(self, corpus):
        train_set, val_set = corpus
        res = train(train_set, val_set, small(max_epochs=3))
        assert res.best_val_acc == max(m.val_acc for m in res.history)
        assert evaluate(res.params, val_set).accuracy == res.best_val_acc

    def test_early_stopping(self, corpus):
        train_set, val_set = corpus
        # learning rate too small to move validation accuracy
        res = train(train_set, val_set, small(max_epochs=10, patience=2, learning_rate=1e-12))
        assert len(res.history) == 3

    def test_divergence_raises_with_diagnostics(self, micro, toy_corpus):
        for name in micro:
            micro[name].data[...] = np.nan if name == "cls.b" else micro[name].data
        state = OptimizerState.create(micro, "adagrad")
        batch = toy_batch(toy_corpus, micro.vocab, 8)
        with pytest.raises(TrainingDivergedError) as info:
            train_epoch(micro, [batch], state, small(), np.random.default_rng(0), epoch=4)
        assert info.value.diagnostics["epoch"] == 4
        assert info.value.diagnostics["batch_index"] == 0
        assert "loss_terms" in info.value.diagnostics

    def test_empty_sets(self, corpus):
        with pytest.raises(InputError):
            train([], corpus[1], small())


class TestGrid:
    def test_single_point(self, corpus):
        train_set, val_set = corpus
        res = grid_search({"learning_rate": [0.02]}, train_set, val_set, small(), epochs=1)
        assert len(res) == 1 and res[0].config.learning_rate == 0.02 and res[0].status == "ok"
        assert res[0].config.patience is None and res[0].config.max_epochs == 1

    def test_diverged_point_ranked_last(self, corpus):
        train_set, val_set = corpus
        with np.errstate(all="ignore"):
            res = grid_search({"learning_rate": [1e300, 0.02]}, train_set, val_set, small(), epochs=1)
        assert [r.status for r in res] == ["ok", "diverged"]
        assert res[0].config.learning_rate == 0.02
        assert math.isnan(res[1].val_acc)

    def test_ranking_is_descending(self, corpus):
        train_set, val_set = corpus
        res = grid_search({"learning_rate": [1e-9, 0.05]}, train_set, val_set, small(), epochs=2)
        assert res[0].val_acc >= res[1].val_acc


# Behavioural proxies on the synthetic corpus; the real-corpus versions live
# in the acceptance suite.
def _vectors(tmp_path, data, dim):
    # stand-in for pretrained vectors: unit-norm random rows
    path = tmp_path / "vectors.txt"
    write_random_vectors(build_vocab(data).itos[2:], path, dim=dim, seed=0)
    return path


def test_synthetic_overfit(tmp_path):
    data = generate_corpus(64, seed=21)
    cfg = small(embed_dim=16, state_dim=16, raw_embed_dim=16, dropout=0.0, batch_size=8, learning_rate=0.05,
                max_epochs=60, patience=None)
    res = train(data, data, cfg, embeddings_path=_vectors(tmp_path, data, 16))
    assert evaluate(res.params, data).accuracy >= 0.95


def test_synthetic_large_ponder_weight_takes_fewer_steps():
    train_set, val_set = generate_corpus(300, seed=8), generate_corpus(100, seed=9)
    steps = {}
    for tau in (0.001, 1.0):
        res = train(train_set, val_set, small(ponder_weight=tau, max_steps=8, max_epochs=3))
        steps[tau] = evaluate(res.final_params, val_set).mean_steps
    assert steps[1.0] <= steps[0.001]


def test_on_epoch_can_stop_training(corpus):
    train_set, val_set = corpus
    seen = []
    res = train(train_set, val_set, small(max_epochs=5, patience=None), on_epoch=lambda m, p: seen.append(m) or m.epoch == 2)
    assert len(res.history) == 2 and len(seen) == 2
