import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_state_from_single_expert, rel_err
from sparsetrack.moe import GatingNetwork
from sparsetrack.numerics import FeedForward, NonFiniteError, OptimizerConfig, Tensor, backward, no_grad
from sparsetrack.synthdata import desk_domains, generate_episode
from sparsetrack.trackformer import (
    TrackDataset,
    TrackformerConfig,
    active_parameters_per_token,
    build_model,
    count_parameters,
    desk_config,
    episode_windows,
    evaluate_mse,
    harder_mix_config,
    load_checkpoint,
    full_scale_config,
    patchify,
    predict,
    save_checkpoint,
    stationary_mse,
    total_loss,
    train,
    windows_from_episodes,
)


def tiny(**kw):
    base = dict(image_size=8, patch_size=4, model_dim=16, heads=2, ff_dim=24, depth=3, moe_layer_indices=(1, 3),
                horizon=4, num_points=4, num_instructions=3, dropout=0.0)
    base.update(kw)
    return TrackformerConfig(**base)


def batch(cfg, b=2, seed=0):
    rng = np.random.default_rng(seed)
    return (
        rng.uniform(size=(b, cfg.image_size, cfg.image_size, cfg.channels)),
        rng.uniform(size=(b, cfg.num_points, 2)),
        rng.integers(0, cfg.num_instructions, size=b),
    )


def randomize(model, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)


# --- config ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        desk_config(moe_layer_indices=(0,))
    with pytest.raises(ValueError):
        desk_config(moe_layer_indices=(9,))
    with pytest.raises(ValueError):
        desk_config(heads=3)
    with pytest.raises(ValueError):
        desk_config(patch_size=5)
    with pytest.raises(ValueError):
        desk_config(lambda_z=-1.0)
    assert TrackformerConfig().moe_layer_indices == (1, 5, 8)
    assert TrackformerConfig().dropout == 0.2 and TrackformerConfig().model_dim == 384
    assert harder_mix_config().moe_layer_indices == (1, 2, 5, 7, 8)
    cfg = desk_config()
    assert TrackformerConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# --- tokenizers ----------------------------------------------------------------------


def test_tokenize_counts_and_zero_case():
    cfg = desk_config()
    model = build_model(cfg, 0)
    assert model.tokenize_observation(np.zeros((1, 32, 32, 3))).shape == (1, 16, 64)
    model.patch_embed.weight.data[:] = 0
    model.patch_embed.bias.data[:] = 0
    tok = model.tokenize_observation(np.random.default_rng(0).uniform(size=(1, 32, 32, 3)))
    assert np.array_equal(tok.data[0], model.pos_embed.data)
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 30, 32, 3)), 8)


def test_tokenize_locality():
    model = build_model(desk_config(), 1)
    a = np.zeros((1, 32, 32, 3))
    b = a.copy()
    a[0, 5, 6] = 1.0  # patch (0, 0)
    b[0, 5, 9] = 1.0  # patch (0, 1)
    c = a.copy()
    c[0, 5, 6] = 0.0
    c[0, 6, 7] = 1.0  # moved within the same patch
    ta, tb, tc = (model.tokenize_observation(x).data[0] - model.pos_embed.data for x in (a, b, c))
    changed = lambda x, y: set(np.nonzero(np.any(x != y, axis=1))[0].tolist())
    assert changed(ta, tc) == {0}
    assert changed(ta, tb) == {0, 1}


def test_track_query_embedding():
    cfg = desk_config()
    model = build_model(cfg, 2)
    pts = Tensor(np.full((1, 32, 2), 0.3))
    tok = model.embed_track_queries(pts).data[0]
    assert tok.shape == (32, 64)
    assert len({row.tobytes() for row in tok}) == 32
    model.point_proj.weight.data[:] = 0
    model.point_proj.bias.data[:] = 0
    assert np.array_equal(model.embed_track_queries(pts).data[0], model.slot_embed.data)


def test_instruction_bounds():
    cfg = tiny()
    model = build_model(cfg, 0)
    img, pts, _ = batch(cfg)
    with pytest.raises(IndexError):
        model.forward(img, pts, [0, 3])


# --- forward ---------------------------------------------------------------------------


def test_forward_shape_under_defaults():
    cfg = desk_config()
    model = build_model(cfg, 0)
    img, pts, ins = batch(cfg, b=3)
    pred, routed = model.forward(img, pts, ins)
    assert pred.shape == (3, 16, 32, 2)
    assert [pos for pos, _ in routed] == [1, 5, 8]
    assert predict(model, img[0], pts[0], ins[0]).shape == (16, 32, 2)


def test_zero_head_predicts_stationary_points():
    cfg = tiny()
    model = build_model(cfg, 0)
    img, pts, ins = batch(cfg)
    out = predict(model, img, pts, ins)
    assert np.array_equal(out, np.broadcast_to(pts[:, None], out.shape))


def test_single_expert_model_matches_dense_baseline():
    for seed in range(3):
        cfg = desk_config(num_experts=1)
        moe = build_model(cfg, seed)
        randomize(moe, seed)
        dense = build_model(cfg.dense(), 99)
        dense.load_state_dict(dense_state_from_single_expert(moe.state_dict()))
        img, pts, ins = batch(cfg, b=2, seed=seed)
        assert np.max(np.abs(predict(moe, img, pts, ins) - predict(dense, img, pts, ins))) <= 1e-9


def test_query_permutation_equivariance():
    cfg = tiny(slot_encoding=False, num_points=6)
    model = build_model(cfg, 3)
    randomize(model, 3)
    img, pts, ins = batch(cfg, b=2)
    perm = np.random.default_rng(0).permutation(6)
    a = predict(model, img, pts, ins)
    b = predict(model, img, pts[:, perm], ins)
    assert np.max(np.abs(a[:, :, perm] - b)) <= 1e-12


def test_predict_is_deterministic_with_dropout_configured():
    cfg = tiny(dropout=0.5, gating_noise=True)
    model = build_model(cfg, 4)
    randomize(model, 4)
    img, pts, ins = batch(cfg)
    assert np.array_equal(predict(model, img, pts, ins), predict(model, img, pts, ins))


# --- loss ------------------------------------------------------------------------------


def test_loss_without_router_terms_is_scaled_mse():
    cfg = tiny(lambda_tra=2.5, lambda_lo_ba=0.0, lambda_z=0.0)
    model = build_model(cfg, 5)
    randomize(model, 5)
    img, pts, ins = batch(cfg)
    tgt = np.random.default_rng(1).uniform(size=(2, 4, 4, 2))
    pred, routed = model.forward(img, pts, ins)
    parts = total_loss(pred, tgt, routed, cfg)
    assert float(parts.total.data) == pytest.approx(2.5 * np.mean((pred.data - tgt) ** 2), rel=1e-14)
    zero = total_loss(pred, pred.data.copy(), routed, cfg)
    assert zero.trajectory == 0.0
    with pytest.raises(ValueError):
        total_loss(pred, tgt[:, :3], routed, cfg)


@settings(max_examples=30, deadline=None)
@given(
    lam=st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10)),
    seed=st.integers(0, 1000),
)
def test_loss_components_recombine(lam, seed):
    cfg = tiny(lambda_tra=lam[0], lambda_lo_ba=lam[1], lambda_z=lam[2])
    model = build_model(cfg, seed)
    img, pts, ins = batch(cfg, seed=seed)
    tgt = np.random.default_rng(seed).uniform(size=(2, 4, 4, 2))
    with no_grad():
        pred, routed = model.forward(img, pts, ins)
    p = total_loss(pred, tgt, routed, cfg)
    recombined = lam[0] * p.trajectory + lam[1] * p.load_balance + lam[2] * p.z
    assert abs(float(p.total.data) - recombined) <= 1e-12 * max(1.0, abs(recombined))


def test_default_z_weight():
    assert desk_config().lambda_z == 1e-4 and desk_config().lambda_lo_ba == 0.0 and desk_config().lambda_tra == 1.0


def end_to_end_gradient_error(cfg, seed, fraction=0.01, min_entries=40):
    """Relative error of autodiff vs central differences on a random subset of parameters."""
    model = build_model(cfg, seed)
    randomize(model, seed, scale=0.2)
    img, pts, ins = batch(cfg, b=2, seed=seed)
    tgt = np.random.default_rng(seed + 1).uniform(size=(2, cfg.horizon, cfg.num_points, 2))
    params = model.parameters()
    sizes = np.array([p.data.size for p in params])
    rng = np.random.default_rng(seed + 2)
    n_pick = max(min_entries, int(fraction * sizes.sum()))
    flat_idx = rng.choice(sizes.sum(), size=n_pick, replace=False)
    owners = np.searchsorted(np.cumsum(sizes), flat_idx, side="right")
    offsets = flat_idx - np.concatenate([[0], np.cumsum(sizes)[:-1]])[owners]

    def loss_value():
        with no_grad():
            pred, routed = model.forward(img, pts, ins)
            return float(total_loss(pred, tgt, routed, cfg).total.data)

    pred, routed = model.forward(img, pts, ins)
    backward(total_loss(pred, tgt, routed, cfg).total)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]  # unused experts
    analytic = np.array([grads[o].reshape(-1)[i] for o, i in zip(owners, offsets)])
    numeric = np.empty(n_pick)
    for j, (o, i) in enumerate(zip(owners, offsets)):
        flat = params[o].data.reshape(-1)
        old = flat[i]
        flat[i] = old + 1e-5
        up = loss_value()
        flat[i] = old - 1e-5
        down = loss_value()
        flat[i] = old
        numeric[j] = (up - down) / 2e-5
    return rel_err(analytic, numeric)


def test_end_to_end_gradient_small_model():
    cfg = tiny(lambda_lo_ba=0.5, lambda_z=0.1, k=2)
    assert end_to_end_gradient_error(cfg, 0) <= 1e-2


# --- parameter counts --------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(
    depth=st.integers(1, 4),
    heads=st.sampled_from([1, 2, 4]),
    dim_mult=st.integers(1, 3),
    ff=st.integers(4, 20),
    n=st.integers(1, 5),
    slot=st.booleans(),
    data=st.data(),
)
def test_parameter_count_matches_enumeration(depth, heads, dim_mult, ff, n, slot, data):
    layers = data.draw(st.sets(st.integers(1, depth)))
    cfg = TrackformerConfig(image_size=8, patch_size=4, model_dim=4 * dim_mult, heads=heads, ff_dim=ff, depth=depth,
                            moe_layer_indices=tuple(layers), num_experts=n, horizon=3, num_points=5,
                            num_instructions=2, slot_encoding=slot)
    assert build_model(cfg, 0).num_parameters() == count_parameters(cfg)


def test_parameter_count_closed_form_audit():
    for cfg in (desk_config(), full_scale_config()):
        d, ff = cfg.model_dim, cfg.ff_dim
        expected = count_parameters(cfg.dense()) + 3 * 3 * FeedForward.count(d, ff) + 3 * GatingNetwork.count(d, 4)
        assert count_parameters(cfg) == expected
    counts = [count_parameters(desk_config(num_experts=n)) for n in range(1, 9)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_active_parameters():
    cfg = desk_config()
    gates = 3 * GatingNetwork.count(64, 4)
    assert active_parameters_per_token(cfg) == count_parameters(cfg.dense()) + gates
    assert active_parameters_per_token(cfg.dense()) == count_parameters(cfg.dense())


# --- data and training ------------------------------------------------------------------


def _small_data(n_eps=4, seed=0):
    doms = desk_domains()
    eps = [generate_episode(doms[i % 2], seed + i) for i in range(n_eps)]
    return windows_from_episodes(eps, 16, 32)


def test_episode_windows():
    ep = generate_episode(desk_domains()[0], 0)
    w = episode_windows(ep, 16, 32)
    assert len(w) == 8 and w.images.shape == (8, 32, 32, 3) and w.targets.shape == (8, 16, 32, 2)
    again = episode_windows(ep, 16, 32)
    assert np.array_equal(w.points, again.points)
    assert stationary_mse(w) > 0


def test_zero_learning_rate_keeps_weights():
    data = _small_data(1).subset(np.arange(1))
    cfg = tiny(image_size=32, patch_size=8, horizon=16, num_points=32, num_instructions=11)
    model = build_model(cfg, 0)
    before = model.state_dict()
    train(data, cfg, OptimizerConfig(lr=0.0, epochs=1, warmup_epochs=0), seed=0, model=model)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_deterministic(tmp_path):
    data = _small_data(2)
    cfg = tiny(image_size=32, patch_size=8, horizon=16, num_points=32, num_instructions=11, dropout=0.1,
               gating_noise=True)
    opt = OptimizerConfig(lr=1e-3, epochs=2, warmup_epochs=1)
    a = train(data, cfg, opt, seed=5, batch_size=4, metrics_path=str(tmp_path / "a.jsonl"))
    b = train(data, cfg, opt, seed=5, batch_size=4, metrics_path=str(tmp_path / "b.jsonl"))
    assert a.final_loss == b.final_loss
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[-1])
    assert {"epoch", "step", "lr", "l_tra", "l_lo_ba", "l_z", "total", "layers"} <= set(rec)
    assert len(rec["layers"]) == 2 and abs(sum(rec["layers"][0]["q"]) - 1) < 1e-12


def test_non_finite_step_aborts():
    data = _small_data(1)
    cfg = tiny(image_size=32, patch_size=8, horizon=16, num_points=32, num_instructions=11)
    model = build_model(cfg, 0)
    model.head.bias.data[0] = np.nan
    with pytest.raises(NonFiniteError):
        train(data, cfg, OptimizerConfig(epochs=1), model=model)
    with pytest.raises(ValueError):
        train(data.subset(np.arange(0)), cfg)


def test_overfit_four_episodes():
    data = _small_data(4)
    cfg = desk_config()
    res = train(data, cfg, OptimizerConfig(lr=1e-3, epochs=200, warmup_epochs=5, weight_decay=0.0), seed=0)
    assert res.history[-1]["l_tra"] < 1e-3


def test_evaluate_and_checkpoint(tmp_path):
    data = _small_data(2)
    cfg = tiny(image_size=32, patch_size=8, horizon=16, num_points=32, num_instructions=11)
    model = build_model(cfg, 1)
    randomize(model, 1, scale=0.05)
    ev = evaluate_mse(model, data)
    assert set(ev["per_domain"]) == {0, 1}
    for (dom, pos), counts in ev["routing_counts"].items():
        assert counts.sum() == (data.domain == dom).sum() * cfg.sequence_length
    ideal = evaluate_mse(build_model(cfg, 1), TrackDataset(data.images, data.points, data.instr, data.domain,
                                                           np.broadcast_to(data.points[:, None], data.targets.shape)))
    assert ideal["mse"] == 0.0
    save_checkpoint(tmp_path / "m.npz", model)
    back = load_checkpoint(tmp_path / "m.npz")
    assert back.config == cfg
    assert np.array_equal(predict(back, data.images[:2], data.points[:2], data.instr[:2]),
                          predict(model, data.images[:2], data.points[:2], data.instr[:2]))
