import json

import numpy as np
import pytest

from msav import ftz
from msav.model import (
    CorruptTensorError,
    MissingTensorError,
    ModelConfig,
    MultiSourceTransformer,
    TensorShapeMismatch,
    UnexpectedTensorError,
    load_checkpoint,
    load_model,
    save_checkpoint,
    tiny_config,
)
from msav.tensor import ShapeError


@pytest.fixture(scope="module")
def paper_model():
    return MultiSourceTransformer(ModelConfig(), seed=0).eval()


def inputs(rng, cfg, batch=2, frames=60, lv=30):
    return (
        rng.normal(size=(batch, frames, cfg.spectral_bins)).astype(np.float32),
        rng.normal(size=(batch, 1, cfg.paudio_dim)).astype(np.float32),
        rng.normal(size=(batch, lv, cfg.pvisual_dim)).astype(np.float32),
    )


def test_default_config_values():
    cfg = ModelConfig()
    assert (cfg.d_model, cfg.n_heads, cfg.ffn_dim) == (96, 3, 96)
    assert cfg.cnn_channels == [12, 24, 48, 96]
    assert [tuple(p) for p in cfg.cnn_pools] == [(3, 4), (2, 4), (2, 4), (1, 2)]
    assert (cfg.time_reduction, cfg.freq_reduction) == (12, 128)
    assert not cfg.positional_encoding


def test_config_rejects_inconsistent_pools():
    with pytest.raises(ValueError):
        ModelConfig(spectral_bins=100)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"d_model": 96, "bogus": 1})


@pytest.mark.parametrize("frames, expected", [(60, 5), (600, 50)])
def test_cnn_output_shape(paper_model, frames, expected):
    out = paper_model.cnn_forward(np.zeros((1, frames, 128), np.float32))
    assert out.shape == (1, expected, 96)


def test_cnn_zero_input_gives_zero_output():
    model = MultiSourceTransformer(ModelConfig(), seed=3).eval()
    for block in model.cnn.block:
        block.conv.bias.data[...] = 0
    out = model.cnn_forward(np.zeros((2, 12, 128), np.float32))
    np.testing.assert_array_equal(out.data, 0.0)


def test_forward_probabilities(paper_model, rng):
    probs = paper_model(*inputs(rng, paper_model.config)).data
    assert probs.shape == (2, 10)
    assert np.all((probs > 0) & (probs < 1))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_eval_passes_bit_identical(paper_model, rng):
    x = inputs(rng, paper_model.config)
    assert paper_model(*x).data.tobytes() == paper_model(*x).data.tobytes()


def test_train_mode_needs_rng(rng):
    model = MultiSourceTransformer(tiny_config(), seed=0)
    cfg = model.config
    with pytest.raises(ValueError, match="random generator"):
        model(*inputs(rng, cfg, frames=4, lv=3))


@pytest.mark.parametrize(
    "which, shape, stream",
    [
        (0, (2, 61, 128), "spectral"),
        (0, (2, 60, 127), "spectral"),
        (1, (2, 1, 100), "pretrained audio"),
        (2, (2, 30, 4095), "pretrained visual"),
        (2, (3, 30, 4096), "batch"),
    ],
)
def test_shape_errors_name_the_stream(paper_model, rng, which, shape, stream):
    x = list(inputs(rng, paper_model.config))
    x[which] = np.zeros(shape, np.float32)
    with pytest.raises(ShapeError, match=stream):
        paper_model(*x)


def test_permutation_invariance_of_visual_and_audio_frames(rng):
    model = MultiSourceTransformer(tiny_config(), seed=1).eval()
    cfg = model.config
    spectral, paudio, pvisual = inputs(rng, cfg, frames=12, lv=5)
    base = model(spectral, paudio, pvisual).data
    perm_v = model(spectral, paudio, pvisual[:, rng.permutation(5)]).data
    assert np.abs(base - perm_v).max() < 1e-5
    conv = model.cnn_forward(spectral)
    perm = rng.permutation(conv.shape[1])
    a = model.fuse(conv, paudio, pvisual).data
    b = model.fuse(conv[:, perm], paudio, pvisual).data
    assert np.abs(a - b).max() < 1e-5


def test_positional_encoding_breaks_permutation_invariance(rng):
    model = MultiSourceTransformer(tiny_config(positional_encoding=True), seed=1).eval()
    spectral, paudio, pvisual = inputs(rng, model.config, frames=12, lv=5)
    base = model(spectral, paudio, pvisual).data
    perm = model(spectral, paudio, pvisual[:, ::-1]).data
    assert np.abs(base - perm).max() > 1e-6


def test_parameter_names_follow_structure():
    names = set(dict(MultiSourceTransformer(ModelConfig()).named_parameters()))
    for expected in [
        "cnn.block2.conv.weight",
        "cnn.block3.bn.gamma",
        "embed_pvisual.weight",
        "encoder_spectral.layer2.self_attn.query.weight",
        "decoder.layer0.cross_attn1.key.bias",
        "head.weight",
    ]:
        assert expected in names


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip_bit_identical(tmp_path, rng):
    model = MultiSourceTransformer(tiny_config(), seed=4)
    for p in model.parameters():
        p.data[...] = rng.normal(size=p.shape)
    save_checkpoint(model, tmp_path / "a", step=17, seed=4, role="teacher")
    ckpt = load_checkpoint(tmp_path / "a")
    assert (ckpt.step, ckpt.seed, ckpt.role) == (17, 4, "teacher")
    save_checkpoint(ckpt.build(), tmp_path / "b", step=17, seed=4, role="teacher")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    assert set(meta) == {"config", "step", "seed", "role"}


def test_checkpoint_errors_are_distinct(tmp_path):
    model = MultiSourceTransformer(tiny_config(), seed=0)
    save_checkpoint(model, tmp_path / "c")
    params = tmp_path / "c" / "params"

    (params / "head.bias.ftz").rename(tmp_path / "held.ftz")
    with pytest.raises(MissingTensorError, match="head.bias"):
        load_checkpoint(tmp_path / "c")
    (tmp_path / "held.ftz").rename(params / "head.bias.ftz")

    ftz.save(params / "extra.weight.ftz", np.zeros(2))
    with pytest.raises(UnexpectedTensorError, match="extra.weight"):
        load_checkpoint(tmp_path / "c")
    (params / "extra.weight.ftz").unlink()

    good = (params / "head.bias.ftz").read_bytes()
    (params / "head.bias.ftz").write_bytes(good[:-2])
    with pytest.raises(CorruptTensorError):
        load_checkpoint(tmp_path / "c")
    (params / "head.bias.ftz").write_bytes(good)
    load_model(tmp_path / "c")


def test_checkpoint_class_count_mismatch(tmp_path):
    save_checkpoint(MultiSourceTransformer(tiny_config(n_classes=3)), tmp_path / "c")
    meta_path = tmp_path / "c" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["config"]["n_classes"] = 12
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(TensorShapeMismatch, match="head"):
        load_checkpoint(tmp_path / "c")
