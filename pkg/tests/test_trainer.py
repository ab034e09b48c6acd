import dataclasses
import warnings

import numpy as np
import pytest
import torch

from ntprompt import objective as obj
from ntprompt import toydata
from ntprompt import trainer as tr
from ntprompt.backbone import DTYPE, MultiScaleFeatures
from ntprompt.bank import build_feature_bank
from ntprompt.datasets import toy_domain
from ntprompt.errors import ConfigError, NumericalAbort
from ntprompt.prompt import style_statistics

CLASSES = list(toydata.CLASS_NAMES)


def _cfg(**kw):
    base = dict(epochs=3, lr=1e-3, cap_m=1.0, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


def _states_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_zero_epochs_returns_initial_parameters(toy_backbone, toy_pair):
    d_a, d_u = toy_pair
    cfg = _cfg(epochs=0)
    res = tr.train_target_specified(cfg, toy_backbone, CLASSES, d_a, d_u)
    init = tr.build_model(toy_backbone, cfg, tr.encode_domain(toy_backbone, d_a))
    assert _states_equal(res.model.state_dict(), init.state_dict())
    assert res.loss_log == []


def test_same_seed_same_checkpoint(toy_backbone, toy_pair):
    d_a, d_u = toy_pair
    h = [tr.train_target_specified(_cfg(epochs=2), toy_backbone, CLASSES, d_a, d_u).checkpoint_hash for _ in range(2)]
    other = tr.train_target_specified(_cfg(epochs=2, seed=1), toy_backbone, CLASSES, d_a, d_u).checkpoint_hash
    assert h[0] == h[1] != other


def test_training_touches_only_projector_and_stam(toy_backbone, toy_pair):
    d_a, d_u = toy_pair
    digest = toy_backbone.parameter_digest()
    cfg = _cfg(epochs=2)
    init = tr.build_model(toy_backbone, cfg, tr.encode_domain(toy_backbone, d_a))
    res = tr.train_target_specified(cfg, toy_backbone, CLASSES, d_a, d_u)
    assert toy_backbone.parameter_digest() == digest == res.manifest.backbone_digest
    trained = dict(res.model.named_parameters())
    assert all(k.startswith(("projector.", "stam.")) for k in trained)
    for name, p in init.named_parameters():
        assert not torch.equal(p, trained[name]), f"{name} was not updated"
    for name, buf in init.named_buffers():
        assert torch.equal(buf, dict(res.model.named_buffers())[name])


def test_banks_stay_frozen_through_training(toy_backbone, toy_pair):
    d_a, d_u = toy_pair
    res = tr.train_target_specified(_cfg(epochs=2), toy_backbone, CLASSES, d_a, d_u)
    for bank, tag in ((res.bank_a, "authorized"), (res.bank_u, "unauthorized")):
        assert bank.current_hash() == bank.content_hash == res.manifest.bank_hashes[tag]
    rebuilt, _ = tr.build_banks(toy_backbone, CLASSES, tr.encode_domain(toy_backbone, d_a), d_a.labels, None, _cfg())
    assert rebuilt.content_hash == res.bank_a.content_hash


def test_target_free_records_generated_domain(toy_backbone, toy_pair):
    d_a, _ = toy_pair
    res = tr.train_target_free(_cfg(epochs=1), toy_backbone, CLASSES, d_a, n_aug=2)
    from ntprompt.scenarios import generate_unauthorized_domain

    expected = generate_unauthorized_domain(d_a, n_aug=2, seed=0).content_hash()
    assert res.manifest.dataset_hashes["generated_unauthorized"] == expected
    assert res.manifest.kind == "target_free"


def test_target_free_n_aug_zero_warns(toy_backbone, toy_pair):
    d_a, _ = toy_pair
    with pytest.warns(RuntimeWarning, match="vacuous"):
        tr.train_target_free(_cfg(epochs=0), toy_backbone, CLASSES, d_a, n_aug=0)


def test_loss_log_and_manifest(toy_backbone, toy_pair):
    d_a, d_u = toy_pair
    res = tr.train_target_specified(_cfg(epochs=2), toy_backbone, CLASSES, d_a, d_u)
    lines = res.loss_log_csv().splitlines()
    assert lines[0] == "step,l_m,l_a,l_u,l_ai,l_ui,l_kl,l_en,total"
    assert len(lines) == 1 + len(res.loss_log)
    assert [e["epoch"] for e in res.manifest.epochs] == [0, 1]
    assert res.manifest.config["lr"] == 1e-3
    for row in res.loss_log:
        assert all(row[t] >= -1e-12 for t in obj.TERMS)


def test_non_finite_term_aborts_with_name():
    with pytest.raises(NumericalAbort, match="l_kl") as info:
        tr.check_finite(obj.LossBreakdown(l_kl=torch.tensor(float("nan"))))
    assert info.value.exit_code == 4


@pytest.mark.parametrize(
    "kw", [{"batch_size": 1}, {"epochs": -1}, {"lr": 0.0}, {"tau": -1.0}, {"cap_mode": "median"}, {"lambda1": -0.1}]
)
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        tr.TrainConfig(**kw)


# -- objective direction --------------------------------------------------------------


def _setup(backbone, d_a, d_u, cfg):
    ms_a, ms_u = tr.encode_domain(backbone, d_a), tr.encode_domain(backbone, d_u)
    bank_a, bank_u = tr.build_banks(backbone, CLASSES, ms_a, d_a.labels, ms_u, cfg)
    model = tr.build_model(backbone, cfg, ms_a)
    ya, yu = torch.as_tensor(d_a.labels), torch.as_tensor(d_u.labels)
    idx = torch.arange(32)
    return model, (ms_a.index(idx), ya[idx]), bank_a, (ms_u.index(idx), yu[idx]), bank_u


@pytest.mark.parametrize("cap_mode", ["batch", "sample"])
def test_step_on_negative_l_u_does_not_decrease_l_u(toy_backbone, toy_pair, cap_mode):
    cfg = _cfg(cap_mode=cap_mode)
    model, batch_a, bank_a, batch_u, bank_u = _setup(toy_backbone, *toy_pair, cfg)
    ce = toy_backbone.class_embeddings(CLASSES)

    def l_u():
        return tr.compute_losses(model, toy_backbone, ce, cfg, batch_a, bank_a, batch_u, bank_u).l_u

    before = l_u()
    cap = cfg.cap_scale * np.log(len(CLASSES))
    opt = torch.optim.SGD(model.parameters(), lr=1e-3)
    opt.zero_grad()
    (-torch.clamp(before, max=cap)).backward()
    opt.step()
    with torch.no_grad():
        assert float(l_u()) >= float(before)


@pytest.mark.slow
def test_l_a_trend_on_probe_batch(toy_backbone):
    # the objective is adversarial, so only the end-of-run trend is asserted, over a full toy-scale run
    ce = toy_backbone.class_embeddings(CLASSES)
    wins = 0
    for seed in range(5):
        d_a, d_u = toy_domain("clean", 250, 32, seed), toy_domain("sketch", 250, 32, seed)
        cfg = tr.TrainConfig(seed=seed, **toydata.TOY_TRAIN)
        model, batch_a, bank_a, _, _ = _setup(toy_backbone, d_a, d_u, cfg)
        with torch.no_grad():
            start = float(tr.compute_losses(model, toy_backbone, ce, cfg, batch_a, bank_a, baseline=True).l_a)
        res = tr.train_target_specified(cfg, toy_backbone, CLASSES, d_a, d_u)
        with torch.no_grad():
            end = float(tr.compute_losses(res.model, toy_backbone, ce, cfg, batch_a, res.bank_a, baseline=True).l_a)
        wins += end <= start
    assert wins >= 4


def test_domain_token_separation_grows(toy_backbone, toy_pair):
    d_a, d_u = toy_pair
    cfg = _cfg(epochs=6)
    init = tr.build_model(toy_backbone, cfg, tr.encode_domain(toy_backbone, d_a))
    res = tr.train_target_specified(cfg, toy_backbone, CLASSES, d_a, d_u)
    held_a = tr.encode_domain(toy_backbone, toy_domain("clean", 16, 32, 99))
    held_u = tr.encode_domain(toy_backbone, toy_domain("sketch", 16, 32, 99))

    def sep(model):
        vals = []
        for idx in np.array_split(np.arange(64), 2):
            idx = torch.as_tensor(idx)
            T_a = model.projector.domain_token(style_statistics(held_a.index(idx)))
            T_u = model.projector.domain_token(style_statistics(held_u.index(idx)))
            vals.append(float(((T_a - T_u) ** 2).mean()))
        return np.mean(vals)

    with torch.no_grad():
        assert sep(res.model) > sep(init)


# -- inference -------------------------------------------------------------------------


def _features(backbone, n=6, seed=0):
    return tr.encode_domain(backbone, toy_domain("clean", n, 32, seed))


def test_predict_single_class_is_zero(toy_backbone):
    model = tr.build_model(toy_backbone, _cfg())
    ms = _features(toy_backbone)
    assert torch.equal(tr.predict(model, toy_backbone, ms, toy_backbone.class_embeddings(["only"])), torch.zeros(len(ms), dtype=torch.long))


def test_predict_visual_equal_to_text_feature(toy_backbone):
    model = tr.build_model(toy_backbone, _cfg(), _features(toy_backbone, 20, 1))
    ms = _features(toy_backbone, 2)
    ce = toy_backbone.class_embeddings(CLASSES)
    f_t = tr.text_features(model, toy_backbone, ms, ce)  # [B, N, C]
    targets = torch.arange(len(ms)) % len(CLASSES)
    final = torch.stack([f_t[i, k] for i, k in enumerate(targets)])
    swapped = MultiScaleFeatures(ms.per_layer, final)
    assert torch.equal(tr.predict(model, toy_backbone, swapped, ce), targets)


def test_predict_matches_brute_force_loop(toy_backbone, toy_pair):
    d_a, d_u = toy_pair
    res = tr.train_target_specified(_cfg(epochs=1), toy_backbone, CLASSES, d_a, d_u)
    model, ce = res.model, toy_backbone.class_embeddings(CLASSES)
    ms = _features(toy_backbone, 3, seed=4)
    with torch.no_grad():
        T = model.projector.domain_token(style_statistics(ms))
        V = model.projector.image_tokens(ms)
        expected = []
        for i in range(len(ms)):
            best, best_k = -np.inf, None
            for k in range(len(CLASSES)):
                prompt = torch.cat([T[None], V[i], ce[k][None]])
                t = toy_backbone.encode_text(prompt)
                v = ms.final[i]
                cos = float(v @ t) / (float(v.norm()) * float(t.norm()))
                if cos > best:
                    best, best_k = cos, k
            expected.append(best_k)
    assert tr.predict(model, toy_backbone, ms, ce).tolist() == expected


def test_eval_batches_cover_every_sample_once():
    for n in (2, 33, 64, 65):
        chunks = tr.eval_batches(n, 32, seed=3)
        assert sorted(np.concatenate(chunks).tolist()) == list(range(n))
        assert min(len(c) for c in chunks) >= 2


def test_pooled_tokens_switch(toy_backbone, toy_pair):
    d_a, d_u = toy_pair
    res = tr.train_target_specified(_cfg(epochs=1, pooled_image_tokens=True), toy_backbone, CLASSES, d_a, d_u)
    ms = _features(toy_backbone, 3)
    assert tr.text_features(res.model, toy_backbone, ms, toy_backbone.class_embeddings(CLASSES)).shape == (4, 64)
    assert tr.predict(res.model, toy_backbone, ms, toy_backbone.class_embeddings(CLASSES)).shape == (12,)
