import numpy as np
import numpy.testing as npt
import pytest

from dermswin.checkpoint import load_checkpoint, save_checkpoint
from dermswin.embedding import PatchConfig
from dermswin.errors import (
    CheckpointFormatError,
    CheckpointIncompatibleError,
    CheckpointIntegrityError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
)
from dermswin.gradcheck import check_gradients
from dermswin.model import (
    ModelConfig,
    block_specs,
    count_parameters,
    forward,
    init_model,
    merge_patches,
    named_parameters,
    set_requires_grad,
)
from dermswin.tensor import Tensor


def tiny_config(**kw):
    defaults = dict(
        patch=PatchConfig(image_h=8, image_w=8, patch_size=2, embed_dim=8),
        depths=(2,), heads=(2,), window=2, expansion=2, kernel=3,
        num_classes=5, head_dropout=0.3,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


class TestModelConfig:
    def test_depths_heads_must_align(self):
        with pytest.raises(ConfigError, match="align"):
            tiny_config(depths=(2, 2), heads=(2,))

    def test_num_classes_floor(self):
        with pytest.raises(ConfigError, match="num_classes"):
            tiny_config(num_classes=1)

    def test_window_must_divide_grid(self):
        with pytest.raises(ConfigError, match="window"):
            tiny_config(window=3)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError, match="heads"):
            tiny_config(heads=(3,))

    def test_merging_grid_and_dims(self):
        cfg = tiny_config(depths=(1, 1), heads=(2, 4), stage_merging=True)
        assert cfg.stage_grids() == [(4, 4), (2, 2)]
        assert cfg.stage_dims() == [8, 16]
        assert cfg.final_dim == 16

    def test_merged_window_divisibility_checked_per_stage(self):
        # Grid 4x4 merges to 2x2, so window 4 cannot tile stage 1.
        patch = PatchConfig(image_h=8, image_w=8, patch_size=2, embed_dim=8)
        with pytest.raises(ConfigError, match="stage 1"):
            ModelConfig(patch=patch, depths=(1, 1), heads=(2, 2), window=4, stage_merging=True)

    def test_global_token_restrictions(self):
        patch = PatchConfig(image_h=8, image_w=8, patch_size=2, embed_dim=8, cls_mode="global_token")
        cfg = ModelConfig(patch=patch, depths=(2,), heads=(2,), window=4)
        assert cfg.patch.uses_cls_token
        with pytest.raises(ConfigError, match="full grid"):
            ModelConfig(patch=patch, depths=(2,), heads=(2,), window=2)
        with pytest.raises(ConfigError, match="single stage"):
            ModelConfig(patch=patch, depths=(1, 1), heads=(2, 4), window=2, stage_merging=True)


class TestBlockSpecs:
    def test_alternating_shift(self):
        cfg = tiny_config(depths=(4,))
        shifts = [s.shift for s in block_specs(cfg)]
        assert shifts == [0, 1, 0, 1]

    def test_shift_suppressed_for_single_window(self):
        # Window covers the whole grid: rolling it would only fragment
        # attention that is already global.
        cfg = tiny_config(window=4)
        assert [s.shift for s in block_specs(cfg)] == [0, 0]

    def test_specs_carry_stage_grids(self):
        cfg = tiny_config(depths=(1, 1), heads=(2, 4), stage_merging=True)
        specs = block_specs(cfg)
        assert [s.grid for s in specs] == [(4, 4), (2, 2)]


class TestParameters:
    def test_names_unique_and_tensors_distinct(self):
        cfg = tiny_config(depths=(1, 1), heads=(2, 4), stage_merging=True)
        params = init_model(cfg, seed=0)
        named = named_parameters(params)
        names = [n for n, _ in named]
        assert len(names) == len(set(names))
        ids = [id(t) for _, t in named]
        assert len(ids) == len(set(ids))
        assert "merge0.reduction" in names
        assert "block1.irb.dw_kernel" in names

    def test_zero_depth_closed_form_count(self):
        # Embedding (12*8 + 16*8) + final norm (2*8) + head (8*5 + 5).
        cfg = tiny_config(depths=(0,), heads=(2,))
        params = init_model(cfg, seed=0)
        assert count_parameters(params) == 12 * 8 + 16 * 8 + 16 + 45

    def test_attention_count_scales_quadratically(self):
        def attn_count(d):
            cfg = tiny_config(patch=PatchConfig(image_h=8, image_w=8, patch_size=2, embed_dim=d),
                              depths=(1,), heads=(2,))
            params = init_model(cfg, seed=0)
            return sum(t.data.size for n, t in named_parameters(params) if ".attn." in n)

        assert attn_count(8) == 4 * 8 * 8
        assert attn_count(16) == 4 * attn_count(8)

    def test_count_invariant_to_values(self):
        cfg = tiny_config()
        a = init_model(cfg, seed=0)
        b = init_model(cfg, seed=99)
        for _, t in named_parameters(b):
            t.data = t.data + 1.0
        assert count_parameters(a) == count_parameters(b)

    def test_ffn_variant_swaps_names(self):
        params = init_model(tiny_config(sublayer_kind="ffn"), seed=0)
        names = [n for n, _ in named_parameters(params)]
        assert "block0.ffn.w1" in names
        assert not any(".irb." in n for n in names)


class TestForward:
    def test_full_scale_logit_shape(self):
        cfg = ModelConfig(
            patch=PatchConfig(image_h=224, image_w=224, patch_size=16, embed_dim=96),
            depths=(4,), heads=(3,), window=7,
        )
        params = init_model(cfg, seed=0)
        images = Tensor(np.random.default_rng(0).standard_normal((2, 224, 224, 3)).astype(np.float32))
        logits, feats = forward(images, params, cfg)
        assert logits.shape == (2, 5)
        assert feats.shape == (2, 96)

    @pytest.mark.parametrize("kw", [
        dict(),
        dict(sublayer_kind="ffn"),
        dict(depths=(1, 1), heads=(2, 4), stage_merging=True),
        dict(num_classes=3),
        dict(irb_inner_skip=False),
    ])
    def test_shape_sweep(self, kw):
        cfg = tiny_config(**kw)
        params = init_model(cfg, seed=1)
        images = Tensor(np.random.default_rng(1).standard_normal((3, 8, 8, 3)).astype(np.float32))
        logits, feats = forward(images, params, cfg)
        assert logits.shape == (3, cfg.num_classes)
        assert feats.shape == (3, cfg.final_dim)

    def test_global_token_forward(self):
        patch = PatchConfig(image_h=8, image_w=8, patch_size=2, embed_dim=8, cls_mode="global_token")
        cfg = ModelConfig(patch=patch, depths=(2,), heads=(2,), window=4)
        params = init_model(cfg, seed=2)
        images = Tensor(np.random.default_rng(2).standard_normal((2, 8, 8, 3)).astype(np.float32))
        logits, feats = forward(images, params, cfg)
        assert logits.shape == (2, 5)
        assert feats.shape == (2, 8)

    def test_eval_forward_deterministic(self):
        cfg = tiny_config()
        params = init_model(cfg, seed=3)
        images = Tensor(np.random.default_rng(3).standard_normal((2, 8, 8, 3)).astype(np.float32))
        a, _ = forward(images, params, cfg)
        b, _ = forward(images, params, cfg)
        npt.assert_array_equal(a.data, b.data)

    def test_train_mode_dropout_needs_rng_and_changes_logits(self):
        cfg = tiny_config()
        params = init_model(cfg, seed=4)
        images = Tensor(np.random.default_rng(4).standard_normal((2, 8, 8, 3)).astype(np.float32))
        with pytest.raises(ConfigError, match="rng"):
            forward(images, params, cfg, train_mode=True)
        eval_logits, eval_feats = forward(images, params, cfg)
        train_logits, train_feats = forward(images, params, cfg, train_mode=True,
                                            rng=np.random.default_rng(5))
        # Features are pre-dropout, so they agree; logits do not.
        npt.assert_array_equal(train_feats.data, eval_feats.data)
        assert not np.array_equal(train_logits.data, eval_logits.data)

    def test_sublayer_swap_preserves_shapes_not_count(self):
        irb_cfg = tiny_config()
        ffn_cfg = tiny_config(sublayer_kind="ffn")
        irb_params = init_model(irb_cfg, seed=6)
        ffn_params = init_model(ffn_cfg, seed=6)
        images = Tensor(np.random.default_rng(6).standard_normal((2, 8, 8, 3)).astype(np.float32))
        li, fi = forward(images, irb_params, irb_cfg)
        lf, ff = forward(images, ffn_params, ffn_cfg)
        assert li.shape == lf.shape and fi.shape == ff.shape
        assert count_parameters(irb_params) != count_parameters(ffn_params)

    def test_image_mismatch_rejected(self):
        cfg = tiny_config()
        params = init_model(cfg, seed=7)
        from dermswin.tensor import ShapeError

        with pytest.raises(ShapeError):
            forward(Tensor(np.zeros((1, 8, 10, 3))), params, cfg)

    def test_merge_patches_halves_grid(self):
        cfg = tiny_config(depths=(1, 1), heads=(2, 4), stage_merging=True)
        params = init_model(cfg, seed=8)
        from dermswin.embedding import TokenSequence

        seq = TokenSequence(Tensor(np.random.default_rng(8).standard_normal((2, 16, 8))), (4, 4))
        out = merge_patches(seq, params.merges[0])
        assert out.tokens.shape == (2, 4, 16)
        assert out.grid == (2, 2)

    def test_small_model_gradient_check(self):
        cfg = ModelConfig(
            patch=PatchConfig(image_h=8, image_w=8, patch_size=2, embed_dim=4),
            depths=(2,), heads=(2,), window=2, expansion=2, kernel=3,
            num_classes=3, head_dropout=0.0,
        )
        params = init_model(cfg, seed=9, dtype=np.float64)
        set_requires_grad(params)
        images = Tensor(np.random.default_rng(9).standard_normal((1, 8, 8, 3)))
        probe = Tensor(np.random.default_rng(10).standard_normal((1, 3)))

        def f():
            logits, _ = forward(images, params, cfg)
            return (logits * probe).sum()

        result = check_gradients(f, named_parameters(params), tol=1e-4)
        assert result.passed, result.worst()


class TestCheckpoint:
    def _roundtrip(self, tmp_path, cfg, **kw):
        params = init_model(cfg, seed=11)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg, **kw)
        return params, load_checkpoint(path)

    def test_round_trip_bit_exact(self, tmp_path):
        cfg = tiny_config()
        params, loaded = self._roundtrip(tmp_path, cfg, extra={"step": "17"})
        assert loaded.config == cfg
        assert loaded.extra == {"step": "17"}
        assert loaded.moments is None
        for (na, ta), (nb, tb) in zip(named_parameters(params), named_parameters(loaded.params)):
            assert na == nb
            assert ta.data.dtype == tb.data.dtype
            npt.assert_array_equal(ta.data, tb.data)

    def test_moments_round_trip(self, tmp_path):
        cfg = tiny_config()
        params = init_model(cfg, seed=12)
        rng = np.random.default_rng(13)
        moments = {n: (rng.standard_normal(t.shape).astype(np.float32),
                       rng.standard_normal(t.shape).astype(np.float32))
                   for n, t in named_parameters(params)}
        path = tmp_path / "opt.ckpt"
        save_checkpoint(path, params, cfg, moments=moments)
        loaded = load_checkpoint(path)
        assert set(loaded.moments) == set(moments)
        for n in moments:
            npt.assert_array_equal(loaded.moments[n][0], moments[n][0])
            npt.assert_array_equal(loaded.moments[n][1], moments[n][1])
        assert loaded.moments["head.weight"][0].flags.writeable

    def test_loaded_tensors_are_writable(self, tmp_path):
        cfg = tiny_config()
        _, loaded = self._roundtrip(tmp_path, cfg)
        for _, t in named_parameters(loaded.params):
            assert t.data.flags.writeable

    def test_bad_magic(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, init_model(cfg, seed=14), cfg)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, init_model(cfg, seed=15), cfg)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError, match="99"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, init_model(cfg, seed=16), cfg)
        raw = path.read_bytes()
        for cut in (10, len(raw) // 2):
            path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointFormatError, match="truncated"):
                load_checkpoint(path)

    def test_flipped_payload_byte(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, init_model(cfg, seed=17), cfg)
        raw = bytearray(path.read_bytes())
        raw[-40] ^= 0xFF  # inside the last tensor's data, before the digest
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointIntegrityError, match="digest"):
            load_checkpoint(path)

    def test_incompatible_config_rejected(self, tmp_path):
        ffn_cfg = tiny_config(sublayer_kind="ffn")
        path = tmp_path / "ffn.ckpt"
        save_checkpoint(path, init_model(ffn_cfg, seed=18), ffn_cfg)
        with pytest.raises(CheckpointIncompatibleError):
            load_checkpoint(path, expected_config=tiny_config())
        # Without an expectation the ffn checkpoint loads fine.
        assert load_checkpoint(path).config == ffn_cfg

    def test_shape_disagreement_with_config(self, tmp_path):
        # Rewrite the embedded config to a wider model while keeping the
        # tensor records: loader must flag the first mismatching record.
        cfg = tiny_config()
        path = tmp_path / "m.ckpt"
        params = init_model(cfg, seed=19)
        save_checkpoint(path, params, cfg)
        raw = path.read_bytes()
        old = b"embed_dim=8\n"
        new = b"embed_dim=16\n"
        body = raw[:-32].replace(old, new)
        import struct as st

        clen = st.unpack_from("<Q", body, 8)[0]
        body = body[:8] + st.pack("<Q", clen + len(new) - len(old)) + body[16:]
        import hashlib

        path.write_bytes(body + hashlib.sha256(body).digest())
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)
