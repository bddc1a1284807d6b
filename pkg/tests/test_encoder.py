import numpy as np
import pytest
import torch

from dapsam.config import EncoderConfig, Toggles, TrainConfig
from dapsam.encoder import (
    block_forward,
    encoder_forward,
    frozen_backbone_forward,
    init_encoder,
    load_pretrained_encoder,
    low_level_project,
    patch_embed,
    trainable_count,
)
from dapsam.errors import InvalidInputError, InventoryError, NumericFailureError
from dapsam.model import forward, init_model
from dapsam.params import ParameterStore, partition_parameters
from dapsam.train import make_optimizer

from .conftest import TOY, fd_grad, max_rel_err


@pytest.fixture
def enc_store():
    store = ParameterStore()
    init_encoder(store, TOY, seed=11)
    return store


def _image(gen, batch=1):
    return torch.rand((batch, 64, 64, 1), generator=gen, dtype=torch.float64)


class TestPatchEmbed:
    def test_shape(self, enc_store, gen):
        assert patch_embed(_image(gen), enc_store, TOY).shape == (1, 8, 8, 16)

    def test_zero_image_zero_bias(self, enc_store):
        enc_store.set("encoder.patch_embed.bias", torch.zeros(16))
        e0 = patch_embed(np.zeros((1, 64, 64, 1)), enc_store, TOY)
        assert torch.count_nonzero(e0) == 0

    def test_patch_layout(self, enc_store):
        # A single lit pixel only affects the token that contains it.
        img = torch.zeros(1, 64, 64, 1, dtype=torch.float64)
        img[0, 19, 42, 0] = 1.0
        enc_store.set("encoder.patch_embed.bias", torch.zeros(16))
        e0 = patch_embed(img, enc_store, TOY)
        nz = torch.nonzero(e0.abs().sum(-1))
        assert nz.tolist() == [[0, 19 // 8, 42 // 8]]
        W = enc_store["encoder.patch_embed.weight"]
        row = (19 % 8) * 8 + (42 % 8)
        assert torch.allclose(e0[0, 2, 5], W[row].detach())

    @pytest.mark.parametrize("shape, axis", [((1, 32, 64, 1), 1), ((1, 64, 48, 1), 2), ((1, 64, 64, 3), 3)])
    def test_dimension_mismatch_names_axis(self, enc_store, shape, axis):
        with pytest.raises(InvalidInputError, match=f"axis {axis}"):
            patch_embed(torch.zeros(shape), enc_store, TOY)

    def test_gradient_matches_finite_differences(self, enc_store, gen):
        img = _image(gen)
        W = enc_store["encoder.patch_embed.weight"]
        probe = torch.randn((1, 8, 8, 16), generator=gen, dtype=torch.float64)

        def fn():
            return (patch_embed(img, enc_store, TOY) * probe).sum()

        W.requires_grad_(True)  # frozen in the store; the check only needs a leaf
        (g,) = torch.autograd.grad(fn(), [W])
        assert max_rel_err(g, fd_grad(fn, W)) < 1e-4


class TestLowLevelProject:
    def test_zero_weight_gives_bias(self, enc_store, gen):
        e0 = torch.randn((2, 8, 8, 16), generator=gen, dtype=torch.float64)
        b = torch.arange(16, dtype=torch.float64)
        enc_store.set("encoder.low_level.weight", torch.zeros(16, 16))
        enc_store.set("encoder.low_level.bias", b)
        out = low_level_project(e0, enc_store)
        assert torch.equal(out, b.expand_as(out))

    def test_identity(self, enc_store, gen):
        e0 = torch.randn((2, 8, 8, 16), generator=gen, dtype=torch.float64)
        enc_store.set("encoder.low_level.weight", torch.eye(16))
        enc_store.set("encoder.low_level.bias", torch.zeros(16))
        assert torch.equal(low_level_project(e0, enc_store), e0)

    def test_trainable_flag(self, enc_store):
        assert not enc_store.is_frozen("encoder.low_level.weight")
        assert enc_store["encoder.low_level.weight"].requires_grad

    def test_gradient(self, enc_store, gen):
        e0 = torch.randn((2, 8, 8, 16), generator=gen, dtype=torch.float64)
        probe = torch.randn_like(e0)
        W = enc_store["encoder.low_level.weight"]

        def fn():
            return (low_level_project(e0, enc_store) * probe).sum()

        (g,) = torch.autograd.grad(fn(), [W])
        assert max_rel_err(g, fd_grad(fn, W)) < 1e-4


class TestEncoderForward:
    def test_zero_adapters_equal_frozen_backbone_bitwise(self, enc_store, gen):
        img = _image(gen, 2)
        assert torch.equal(encoder_forward(img, enc_store, TOY), frozen_backbone_forward(img, enc_store, TOY))

    def test_zero_adapters_identity_32bit(self, gen):
        store = ParameterStore()
        init_encoder(store, TOY, seed=2, dtype=torch.float32)
        img = torch.rand((2, 64, 64, 1), generator=gen)
        diff = encoder_forward(img, store, TOY) - frozen_backbone_forward(img, store, TOY)
        assert diff.abs().max() <= 1e-6

    def test_nonzero_adapters_change_output(self, enc_store, gen):
        enc_store.set("encoder.blocks.0.adapter_attn.up_weight", torch.randn((4, 16), generator=gen, dtype=torch.float64))
        img = _image(gen)
        assert not torch.equal(encoder_forward(img, enc_store, TOY), frozen_backbone_forward(img, enc_store, TOY))

    def test_deterministic(self, enc_store, gen):
        img = _image(gen, 2)
        assert torch.equal(encoder_forward(img, enc_store, TOY), encoder_forward(img, enc_store, TOY))

    def test_same_seed_same_parameters(self):
        a, b = ParameterStore(), ParameterStore()
        init_encoder(a, TOY, seed=5)
        init_encoder(b, TOY, seed=5)
        assert all(torch.equal(a[n], b[n]) for n in a)

    def test_token_grid_constant(self, enc_store, gen):
        x = patch_embed(_image(gen), enc_store, TOY)
        shapes = [x.shape]
        for i in range(TOY.depth):
            x = block_forward(x, enc_store, f"encoder.blocks.{i}", TOY.num_heads)
            shapes.append(x.shape)
        assert set(shapes) == {(1, 8, 8, 16)}

    def test_non_finite_reports_block(self, enc_store, gen):
        enc_store.entry("encoder.blocks.1.mlp.fc2.bias").tensor.data[0] = float("inf")
        with pytest.raises(NumericFailureError, match="block 1"):
            encoder_forward(_image(gen), enc_store, TOY)

    def test_trainable_count_closed_form(self, enc_store):
        # Enumerate the trainable entries directly and compare with the closed form.
        enumerated = sum(enc_store[n].numel() for n in enc_store if not enc_store.is_frozen(n))
        C, r, L = 16, 4, 2
        assert enumerated == L * 2 * (C * r + r + r * C + C) + C * C + C == trainable_count(TOY) == 864

    def test_vitb_preset(self):
        cfg = EncoderConfig.vitb()
        assert (cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.num_heads) == (384, 16, 768, 12, 12)
        assert cfg.grid == 24 and trainable_count(cfg) == 12 * 2 * (768 * 4 * 2 + 4 + 768) + 768 * 768 + 768

    def test_gradients_all_trainable(self, gen):
        cfg = EncoderConfig(image_size=16, patch_size=4, embed_dim=8, depth=1, num_heads=2, adapter_rank=2)
        store = ParameterStore()
        init_encoder(store, cfg, seed=1)
        for n in store.trainable():
            store.set(n, torch.randn(store.entry(n).shape, generator=gen, dtype=torch.float64) * 0.3)
        img = torch.rand((1, 16, 16, 1), generator=gen, dtype=torch.float64)
        probe = torch.randn((1, 4, 4, 8), generator=gen, dtype=torch.float64)

        def fn():
            return (encoder_forward(img, store, cfg) * probe).sum()

        names = store.trainable()
        grads = torch.autograd.grad(fn(), [store[n] for n in names])
        for n, g in zip(names, grads):
            assert max_rel_err(g, fd_grad(fn, store[n])) < 1e-4, n


class TestPartition:
    def test_empty_store(self):
        assert partition_parameters(ParameterStore()) == ([], [])

    def test_toy_namespaces(self, toy_store):
        frozen, trainable = partition_parameters(toy_store)
        assert set(frozen).isdisjoint(trainable) and set(frozen) | set(trainable) == set(toy_store)
        for name in toy_store:
            if ".adapter_" in name or name.startswith(("decoder.", "prompt.")) or name.startswith("encoder.low_level"):
                assert name in trainable
            else:
                assert name in frozen and name.startswith("encoder.")

    def test_unknown_name(self):
        store = ParameterStore()
        store.add("mystery.weight", torch.zeros(2), frozen=True)
        with pytest.raises(InventoryError, match="mystery.weight"):
            partition_parameters(store)

    def test_flag_disagreement(self):
        store = ParameterStore()
        store.add("decoder.head.bias", torch.zeros(2), frozen=True)
        with pytest.raises(InventoryError):
            partition_parameters(store)

    def test_frozen_bit_identical_after_five_steps(self, gen):
        tc = TrainConfig(seed=4, bank_size=8)
        store = init_model(TOY, tc)
        frozen, _ = partition_parameters(store)
        before = store.snapshot(frozen)
        opt = make_optimizer(store, tc)
        img = torch.rand((2, 64, 64, 1), generator=gen, dtype=torch.float64)
        for _ in range(5):
            loss = forward(img, store, TOY, tc).square().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        after = store.snapshot(frozen)
        assert all(np.array_equal(before[n], after[n]) for n in frozen)
        assert all(store[n].grad is None for n in frozen)


class TestPretrainedImport:
    def test_loads_matching_arrays(self, enc_store):
        arr = np.full((64, 16), 0.5)
        loaded = load_pretrained_encoder(enc_store, {"patch.w": arr}, {"patch.w": "encoder.patch_embed.weight"})
        assert loaded == ["encoder.patch_embed.weight"]
        assert np.array_equal(enc_store["encoder.patch_embed.weight"].numpy(), arr)

    def test_rejects_shape_mismatch(self, enc_store):
        with pytest.raises(InvalidInputError, match="encoder.pos_embed"):
            load_pretrained_encoder(enc_store, {"encoder.pos_embed": np.zeros((24, 24, 16))})

    def test_rejects_trainable_targets(self, enc_store):
        with pytest.raises(InvalidInputError):
            load_pretrained_encoder(enc_store, {"encoder.low_level.bias": np.zeros(16)})

    def test_unknown_target(self, enc_store):
        with pytest.raises(InventoryError):
            load_pretrained_encoder(enc_store, {"x": np.zeros(3)}, {"x": "encoder.nope"})
