import torch

from dualseg.config import default_config
from dualseg.model import build_model


def tiny_config(**overrides):
    cfg = default_config()
    cfg["data"]["crop"] = 32
    cfg["backbone"].update({"depth": 4, "embed_dim": 16, "num_heads": 2,
                            "tap_indices": [2, 4]})
    cfg["decoder"].update({"channels": 8, "ppm_bins": [1, 2]})
    for key, value in overrides.items():
        section, leaf = key.split(".")
        cfg[section][leaf] = value
    return cfg


def test_parameter_groups_partition_every_parameter():
    model = build_model(tiny_config(), 0)
    groups = model.parameter_groups()
    names = [n for items in groups.values() for n, _ in items]
    assert sorted(names) == sorted(n for n, _ in model.named_parameters())


def test_inference_purity_between_masked_twins():
    """Same shared weights with and without auxiliary heads: identical logits."""
    cfg_on = tiny_config()
    cfg_off = tiny_config()
    cfg_off["mcrm"]["enabled"] = False
    model_on = build_model(cfg_on, 7)
    model_off = build_model(cfg_off, 7)
    shared = {n: p for n, p in model_on.named_parameters() if not n.startswith("aux_heads.")}
    with torch.no_grad():
        for n, p in model_off.named_parameters():
            p.copy_(shared[n])
    rgb = torch.randn(2, 3, 32, 32)
    aux = torch.randn(2, 1, 32, 32)
    model_on.eval()
    model_off.eval()
    assert torch.equal(model_on(rgb, aux), model_off(rgb, aux))
    assert model_on.inference_parameter_count() == model_off.inference_parameter_count()
    assert model_off.inference_parameter_count() == sum(
        p.numel() for p in model_off.parameters()
    )


def test_training_fused_branch_equals_inference_output():
    cfg = tiny_config()
    cfg["cpia"]["dropout"] = 0.0  # the only stochastic piece of the forward pass
    model = build_model(cfg, 3)
    rgb = torch.randn(1, 3, 32, 32)
    aux = torch.randn(1, 1, 32, 32)
    model.train()
    train_out = model.forward_train(rgb, aux)
    model.eval()
    with torch.no_grad():
        infer = model(rgb, aux)
    assert torch.equal(train_out.logits.detach(), infer)


def test_forward_train_requires_training_mode():
    model = build_model(tiny_config(), 0)
    model.eval()
    try:
        model.forward_train(torch.randn(1, 3, 32, 32), torch.randn(1, 1, 32, 32))
    except RuntimeError as exc:
        assert "training" in str(exc)
    else:
        raise AssertionError("expected a contract violation")


def test_eval_forward_is_deterministic_despite_dropout_config():
    model = build_model(tiny_config(), 5)
    model.eval()
    rgb = torch.randn(1, 3, 32, 32)
    aux = torch.randn(1, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(model(rgb, aux), model(rgb, aux))


def test_base_variant_has_no_adapter_or_gate_parameters():
    cfg = tiny_config()
    cfg["cpia"]["enabled"] = False
    cfg["dgfm"]["enabled"] = False
    cfg["mcrm"]["enabled"] = False
    model = build_model(cfg, 0)
    names = [n for n, _ in model.named_parameters()]
    assert not any(n.startswith("adapters.") for n in names)
    assert not any(n.startswith("fusion.") for n in names)
    assert not any(n.startswith("aux_heads.") for n in names)
    model.eval()
    out = model(torch.randn(1, 3, 32, 32), torch.randn(1, 1, 32, 32))
    assert out.shape == (1, 6, 32, 32)


def test_perturbing_aux_input_changes_fused_output():
    model = build_model(tiny_config(), 11)
    model.eval()
    rgb = torch.randn(1, 3, 32, 32)
    aux = torch.randn(1, 1, 32, 32)
    with torch.no_grad():
        a = model(rgb, aux)
        b = model(rgb, aux + 0.5)
    assert (a - b).abs().max() > 0
