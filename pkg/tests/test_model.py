import numpy as np
import pytest
import torch

from config import DecodeConfig
from errors import (
    CheckpointError, InvalidInputError, InvalidSampleError, InvalidStateError, RoutingError,
)
from model import (
    DTYPE, Routing, batch_loss, forward, generate, generate_batch, gradients,
    last_token_representation, last_token_representations, load_checkpoint, loss_data, loss_task,
    loss_train, pad_batch, pretrain_backbone, save_checkpoint, teacher_forced_accuracy,
)
from numerics import finite_difference_gradient
from taskgen import EncodedSample, make_pretraining_corpus, training_examples
from tiny_configs import tiny_backbone


def _coefficient(values):
    return torch.tensor(values, dtype=DTYPE, requires_grad=True)


def _check_gradient(state, batch, routing, name, param, selector, mu=0.25, coords=6):
    """Analytic gradient of ``param`` against central differences on a few coordinates."""
    analytic = gradients(state, batch, routing, selector, mu)[name].reshape(-1)
    idx = torch.as_tensor(np.linspace(0, param.numel() - 1, num=min(coords, param.numel())).astype(np.int64))
    flat = param.detach().view(-1)
    start = flat[idx].clone()

    def f(x):
        with torch.no_grad():
            flat[idx] = torch.as_tensor(x, dtype=DTYPE)
            value = batch_loss(state, batch, routing, selector, mu).item()
            flat[idx] = start
        return value

    numeric = finite_difference_gradient(f, start.numpy(), h=1e-5)
    np.testing.assert_allclose(analytic[idx].numpy(), numeric, rtol=1e-4, atol=1e-7)


class TestForward:
    def test_bare_backbone_matches_module_forward(self, state, vocab):
        tokens = pad_batch([[5, 6, 7], [8, 9]])
        trace = forward(state, tokens)
        np.testing.assert_allclose(trace.logits.detach(), state.backbone(tokens).detach())
        assert trace.logits.shape == (2, 3, state.config.vocab_size)
        assert torch.all(torch.isfinite(trace.logits))

    def test_single_member_fusion_equals_single_routing(self, state):
        state.add_adapter("l0-m0", 0, 1)
        state.add_adapter("l1-m0", 1, 2)
        single = forward(state, [5, 6, 7], Routing.single(["l0-m0", "l1-m0"]))
        fused = forward(state, [5, 6, 7], Routing.fusion([["l0-m0"], ["l1-m0"]], [_coefficient([0.7])] * 2))
        np.testing.assert_allclose(single.logits.detach(), fused.logits.detach(), atol=1e-12)

    def test_fusion_is_a_convex_combination(self, state):
        for i, layer in enumerate((0, 0, 1, 1)):
            state.add_adapter(f"l{layer}-m{i}", layer, i)
        routing = Routing.fusion(
            [["l0-m0", "l0-m1"], ["l1-m2", "l1-m3"]], [_coefficient([0.5, -1.0]), _coefficient([2.0, 0.0])]
        )
        trace = forward(state, [5, 6, 7, 8], routing)
        for l in range(2):
            w = routing.layer_weights(l)
            assert float(w.sum()) == pytest.approx(1.0, abs=1e-12)
            expected = w[0] * trace.module_outputs[l][0] + w[1] * trace.module_outputs[l][1]
            np.testing.assert_allclose(trace.fused_outputs[l].detach(), expected.detach(), atol=1e-6)

    def test_adapter_keeps_residual(self, state):
        adapter = state.add_adapter("l0-m0", 0, 0)
        with torch.no_grad():
            adapter.up.weight.zero_()
        x = torch.randn(1, 3, state.config.hidden_width, dtype=DTYPE)
        np.testing.assert_allclose(adapter(x).detach(), x)

    def test_invalid_inputs(self, state):
        with pytest.raises(InvalidInputError):
            forward(state, [state.config.vocab_size])
        with pytest.raises(InvalidInputError):
            forward(state, [5] * (state.config.max_sequence_length + 1))
        with pytest.raises(RoutingError):
            forward(state, [5, 6], Routing.single(["missing", "missing"]))


class TestLosses:
    def test_train_loss_is_additive(self, state, small_suite):
        state.add_adapter("l0-m0", 0, 0)
        state.add_adapter("l1-m0", 1, 1)
        routing = Routing.single(["l0-m0", "l1-m0"])
        example = training_examples(small_suite.tasks[0], "train", 32)[0]
        total = loss_train(state, example, routing, 0.25).item()
        parts = loss_task(state, example.task, routing).item() + 0.25 * loss_data(state, example.data, routing).item()
        assert total == pytest.approx(parts, abs=1e-9)
        assert loss_train(state, example, routing, 0.0).item() == pytest.approx(loss_task(state, example.task, routing).item())

    def test_empty_answer_rejected(self, state):
        sample = EncodedSample(tokens=(5, 2, 6, 2), answer_start=3, total_length=4)
        with pytest.raises(InvalidSampleError):
            loss_task(state, sample, None)

    def test_data_loss_needs_generation_token(self, state, small_suite):
        example = training_examples(small_suite.tasks[0], "train", 32)[0]
        with pytest.raises(InvalidSampleError):
            loss_data(state, example.task, None)


class TestGradients:
    @pytest.fixture
    def fused(self, state, small_suite):
        for i, layer in enumerate((0, 0, 1, 1)):
            state.add_adapter(f"l{layer}-m{i}", layer, i + 10)
        coefficients = [_coefficient([0.3, -0.2]), _coefficient([-0.1, 0.4])]
        routing = Routing.fusion(
            [["l0-m0", "l0-m1"], ["l1-m2", "l1-m3"]], coefficients, ["adaptation/0", "adaptation/1"]
        )
        state.set_trainable(["l0-m1", "l1-m3"], ["adaptation/0", "adaptation/1"])
        batch = training_examples(small_suite.tasks[0], "train", 32)[:3]
        return state, routing, batch

    @pytest.mark.parametrize("selector", ["task", "data", "train"])
    def test_adapter_gradients_match_finite_differences(self, fused, selector):
        state, routing, batch = fused
        for name in ("down.weight", "up.weight", "up.bias"):
            param = dict(state.adapter("l0-m1").named_parameters())[name]
            _check_gradient(state, batch, routing, f"adapter/l0-m1/{name}", param, selector)

    def test_coefficient_gradients_match_finite_differences(self, fused):
        state, routing, batch = fused
        for l in range(2):
            _check_gradient(state, batch, routing, f"coefficient/adaptation/{l}", routing.coefficients[l], "train")

    def test_frozen_parameters_have_no_gradient(self, fused):
        state, routing, batch = fused
        store = gradients(state, batch, routing)
        assert not any(k.startswith("adapter/l0-m0") or k.startswith("adapter/l1-m2") for k in store)
        assert not any(k.startswith("backbone") for k in store)
        assert set(k.split("/")[0] for k in store) == {"adapter", "coefficient"}

    def test_masked_coefficient_must_require_grad(self, state):
        state.add_adapter("l0-m0", 0, 0)
        state.add_adapter("l1-m0", 1, 0)
        frozen = torch.tensor([0.0], dtype=DTYPE)
        routing = Routing.fusion([["l0-m0"], ["l1-m0"]], [frozen, frozen], ["c/0", "c/1"])
        state.set_trainable([], ["c/0"])
        with pytest.raises(InvalidStateError):
            state.trainable_parameters(routing)

        live = torch.tensor([0.0], dtype=DTYPE, requires_grad=True)
        accepted = Routing.fusion([["l0-m0"], ["l1-m0"]], [live, frozen], ["c/0", "c/1"])
        params = state.trainable_parameters(accepted)
        assert list(params) == ["coefficient/c/0"]
        assert params["coefficient/c/0"] is live

    def test_unmasked_frozen_coefficient_is_skipped(self, state):
        state.add_adapter("l0-m0", 0, 0)
        state.add_adapter("l1-m0", 1, 0)
        frozen = torch.tensor([0.0], dtype=DTYPE)
        routing = Routing.fusion([["l0-m0"], ["l1-m0"]], [frozen, frozen], ["c/0", "c/1"])
        state.set_trainable(["l0-m0"], [])
        params = state.trainable_parameters(routing)
        assert params and all(k.startswith("adapter/l0-m0/") for k in params)

    def test_empty_mask_gives_empty_store(self, state, small_suite):
        batch = training_examples(small_suite.tasks[0], "train", 32)[:2]
        assert gradients(state, batch, None) == {}


class TestGeneration:
    def test_zero_new_tokens(self, state):
        assert generate(state, [5, 6], None, DecodeConfig(max_new_tokens=0)) == []

    def test_stops_at_max_length(self, state):
        prefix = [5] * (state.config.max_sequence_length - 2)
        out = generate(state, prefix, None, DecodeConfig(max_new_tokens=50))
        assert len(out) <= 2

    def test_sampling_is_seeded(self, state):
        decode = DecodeConfig(strategy="top_k", top_k=5, max_new_tokens=6, seed=3)
        a = generate_batch(state, [[5, 6], [7, 8, 9]], None, decode)
        b = generate_batch(state, [[5, 6], [7, 8, 9]], None, decode)
        assert a == b

    def test_greedy_batch_matches_single(self, state):
        decode = DecodeConfig(max_new_tokens=5)
        batch = generate_batch(state, [[5, 6], [7, 8], [9, 10, 11]], None, decode)
        assert batch[2] == generate(state, [9, 10, 11], None, decode)

    def test_empty_prefix_rejected(self, state):
        with pytest.raises(InvalidInputError):
            generate(state, [], None)


class TestRepresentations:
    def test_padding_does_not_change_last_token(self, state):
        sequences = [[5, 6, 7], [8, 9, 10, 11, 12]]
        tokens = pad_batch(sequences)
        reps = last_token_representations(forward(state, tokens), tokens)
        alone = last_token_representation(forward(state, [5, 6, 7]), [5, 6, 7])
        assert reps.shape == (2, state.config.hidden_width)
        np.testing.assert_allclose(reps[0], alone, atol=1e-12)

    def test_token_inputs_agree(self, state):
        sequences = [[5, 6, 7], [8, 9, 10, 11, 12]]
        tokens = pad_batch(sequences)
        trace = forward(state, tokens)
        from_tensor = last_token_representations(trace, tokens)
        from_lists = last_token_representations(trace, sequences)
        np.testing.assert_array_equal(from_tensor, from_lists)

        single = forward(state, [5, 6, 7])
        flat = last_token_representations(single, [5, 6, 7])
        row = last_token_representations(single, torch.tensor([5, 6, 7]))
        assert flat.shape == row.shape == (1, state.config.hidden_width)
        np.testing.assert_array_equal(flat, row)

    def test_all_padding_rejected(self, state):
        tokens = torch.zeros(1, 3, dtype=torch.long)
        with pytest.raises(InvalidInputError):
            last_token_representations(forward(state, tokens), tokens)


class TestPretraining:
    def test_zero_steps_gives_frozen_backbone(self, state):
        assert not any(p.requires_grad for p in state.backbone.parameters())
        assert len(state.adapters) == 0

    def test_empty_corpus_rejected(self):
        with pytest.raises(InvalidInputError):
            pretrain_backbone([], 0, 0, tiny_backbone())

    def test_pretraining_improves_next_token_accuracy(self, vocab):
        config = tiny_backbone(hidden_width=16, ffn_width=32, pretrain_batch_size=16)
        corpus = make_pretraining_corpus(200, 0, config.max_sequence_length, vocab)
        runs = [s for s in corpus if vocab.sep_id not in s][:40]
        starts = [1] * len(runs)
        before = teacher_forced_accuracy(pretrain_backbone(corpus, 0, 0, config), runs, starts)
        after = teacher_forced_accuracy(pretrain_backbone(corpus, 300, 0, config), runs, starts)
        assert after > before + 0.2


class TestCheckpoint:
    def test_round_trip(self, state, tmp_path):
        state.add_adapter("l1-m0", 1, 4)
        path = tmp_path / "state.ckpt"
        save_checkpoint(state, str(path))
        loaded = load_checkpoint(str(path))
        assert loaded.backbone_checksum() == state.backbone_checksum()
        assert loaded.module_checksums() == state.module_checksums()
        assert loaded.adapter("l1-m0").layer_index == 1
        assert loaded.config == state.config

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_wrong_version(self, state, tmp_path):
        path = tmp_path / "state.ckpt"
        save_checkpoint(state, str(path))
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    @pytest.mark.parametrize("raw", [b"", b"DM", b"DMEA", b"DMEA\x01\x00\x00"])
    def test_shorter_than_header(self, tmp_path, raw):
        path = tmp_path / "short.ckpt"
        path.write_bytes(raw)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_header_length_past_end(self, state, tmp_path):
        path = tmp_path / "state.ckpt"
        save_checkpoint(state, str(path))
        raw = path.read_bytes()
        path.write_bytes(raw[:10] + raw[10:30])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_truncated(self, state, tmp_path):
        path = tmp_path / "state.ckpt"
        save_checkpoint(state, str(path))
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))
