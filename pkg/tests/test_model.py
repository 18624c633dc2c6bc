import numpy as np
import pytest

from lightdetr import model as M
from lightdetr.config import SCALE_NAMES, resolve_config
from lightdetr.encoder import LayoutMode
import oracles as O


def analytic(cfg):
    """(params, multiply-adds) from the closed forms, at the config's input size."""
    g = cfg.input_size // 16
    t = g * g
    e, d = cfg.encoder, cfg.decoder
    cin, co = e.out_channels, cfg.projector.out_channels
    enc = O.encoder_macs(e.num_layers, e.embed_dim, t, t // e.num_windows, set(e.window_attention_indexes))
    if cfg.projector.multi_scale:
        proj = (t * cin * 4 * co + O.conv_macs(g // 2, g // 2, 3, cin, co)
                + O.c2f_macs(2 * g, 2 * g, co, co) + O.c2f_macs(g // 2, g // 2, co, co))
        levels = [4 * t, t // 4]
    else:
        proj = O.c2f_macs(g, g, cin, co)
        levels = [t]
    dec = O.decoder_macs(levels, d.hidden_dim, d.num_queries, cfg.num_classes, d.cross_attn_heads,
                         d.sampling_points)
    params = (O.encoder_params(e.num_layers, e.embed_dim, t)
              + O.projector_params(cin, co, cfg.projector.multi_scale)
              + O.decoder_params(d.hidden_dim, d.num_queries, cfg.num_classes, d.cross_attn_heads,
                                 len(levels), d.sampling_points))
    return params, enc + proj + dec


@pytest.mark.parametrize("scale", SCALE_NAMES)
def test_parameter_count_matches_closed_form(scale):
    cfg = resolve_config(scale)
    pc = M.count_parameters(cfg)
    d = cfg.decoder
    assert pc.inference == analytic(cfg)[0]
    assert pc.training == O.decoder_params(d.hidden_dim, d.num_queries, cfg.num_classes, d.cross_attn_heads,
                                           d.num_levels, d.sampling_points, groups=d.num_groups) \
        - O.decoder_params(d.hidden_dim, d.num_queries, cfg.num_classes, d.cross_attn_heads,
                           d.num_levels, d.sampling_points) + pc.inference


@pytest.mark.parametrize("scale", ["tiny", "small", "large"])
def test_flops_match_closed_form_at_320(scale):
    cfg = resolve_config(scale, {"input_size": 320})
    rep = M.count_flops(cfg)
    assert rep.flops == analytic(cfg)[1]
    assert rep.raw_flops == 2 * rep.flops


def test_doubling_width_quadruples_attention_weights():
    a = O.encoder_params(1, 192, 0) - 16 * 16 * 3 * 192 - 192
    b = O.encoder_params(1, 384, 0) - 16 * 16 * 3 * 384 - 384
    assert 3.9 < b / a < 4.05
    small, medium = (M.count_parameters(resolve_config(s)).inference for s in ("small", "medium"))
    assert medium > 2 * small


def test_window_layers_scale_linearly_global_quadratically():
    def attn_macs(windows):
        cfg = resolve_config("small", {"encoder.window_attention_indexes": windows})
        return {s: M.count_flops(cfg, s).flops for s in (320, 640)}
    win = attn_macs([0, 1, 3, 6, 7, 9])
    glob = attn_macs([])
    # swapping six window layers for global ones adds 2 * T * (T - T/16) * d * 6
    extra = {s: glob[s] - win[s] for s in (320, 640)}
    for s in (320, 640):
        t = (s // 16) ** 2
        assert extra[s] == 6 * 2 * t * (t - t // 16) * 192
    assert extra[640] / extra[320] == pytest.approx(16, rel=0.01)


def test_layout_modes_have_identical_arithmetic():
    cfg = resolve_config("tiny", {"input_size": 320})
    params = M.init_model(cfg)
    a = M.count_flops(cfg, layout_mode=LayoutMode.ROW_MAJOR_BASELINE, params=params)
    b = M.count_flops(cfg, layout_mode=LayoutMode.WINDOW_MAJOR_OPTIMIZED, params=params)
    assert a.raw_flops == b.raw_flops
    assert (a.permutations, b.permutations) == (6, 2)


def test_pos_embed_resize():
    pos = np.arange(4 * 4 * 2, dtype=np.float32).reshape(16, 2)
    assert M.resize_pos_embed(pos, (4, 4), (4, 4)) is pos
    up = M.resize_pos_embed(pos, (4, 4), (8, 8)).reshape(8, 8, 2)
    assert np.allclose(up[0, 0], pos[0]) and np.allclose(up[-1, -1], pos[-1])


def test_inference_at_320_is_deterministic(tmp_path):
    cfg = resolve_config("tiny", {"input_size": 320})
    params = M.init_model(cfg)
    res = M.forward(M.synthetic_image(320, 0), cfg, params)
    assert (res.encoded.height, res.encoded.width) == (20, 20)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    d = M.run_inference(cfg, out_path=a, params=params)
    M.run_inference(cfg, out_path=b)
    assert a.read_bytes() == b.read_bytes()
    assert len(d) == 100 and np.all(np.diff(d.scores) <= 0)
    assert np.all((d.boxes >= 0) & (d.boxes <= 1)) and np.all(d.boxes[:, 2:] > 0)


def test_image_loading(tmp_path):
    img = M.synthetic_image(32, 1)
    ppm = tmp_path / "x.ppm"
    ppm.write_bytes(b"P6\n# comment\n32 32\n255\n" + img.tobytes())
    assert np.array_equal(M.load_image(ppm), img)
    np.save(tmp_path / "x.npy", img)
    assert np.array_equal(M.load_image(tmp_path / "x.npy"), img)
    with pytest.raises(ValueError):
        M.load_image(tmp_path / "x.png")
    with pytest.raises(ValueError):
        M.normalize_image(np.zeros((4, 4)))
