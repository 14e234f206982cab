import pytest
import torch

from osad import pipeline as P
from osad.errors import DataError
from osad.networks import ModelConfig, OsdnModel


def test_grid_has_nine_distinct_rows():
    labels = [P.toggle_label(t) for t in P.ABLATION_GRID]
    assert len(labels) == 9 == len(set(labels))
    assert labels[0] == "Enc" and labels[-1] == "Enc+Dec+DADL+SSD+CAML"


@pytest.mark.parametrize("toggles", [P.ABLATION_GRID[0], P.ABLATION_GRID[-1]])
def test_checkpoint_round_trip(tmp_path, toggles):
    torch.manual_seed(0)
    model = OsdnModel(ModelConfig(num_classes=2, profile="micro", **toggles)).eval()
    P.save_checkpoint(tmp_path / "ck.pt", model, 3, "hash")
    back, payload = P.load_checkpoint(tmp_path / "ck.pt")
    assert payload["epoch"] == 3 and payload["toggles"] == model.cfg.toggles
    x = torch.rand(2, 1, 16, 16)
    assert torch.equal(back.logits(x), model.logits(x))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        P.load_checkpoint(tmp_path / "nope.pt")
    torch.save({"format_version": 99}, tmp_path / "old.pt")
    with pytest.raises(DataError, match="version"):
        P.load_checkpoint(tmp_path / "old.pt")


def test_with_toggles_sets_components(toy_cfg):
    cfg = P.with_toggles(toy_cfg("method=ours"), P.ABLATION_GRID[1], seed=4)
    assert cfg["seed"] == 4 and cfg["dadl"]["enabled"] and not cfg["model"]["dec"]
    assert cfg["method"] is None


def test_summary_is_median_and_skips_failures():
    rows = [
        {"components": "Enc", "seed": 0, "auc_roc": 0.5, "closed_set_acc": 10.0, "error": None},
        {"components": "Enc", "seed": 1, "auc_roc": 0.7, "closed_set_acc": 30.0, "error": None},
        {"components": "Enc", "seed": 2, "auc_roc": 0.6, "closed_set_acc": 90.0, "error": None},
        {"components": "Enc+Dec", "seed": 0, "auc_roc": None, "closed_set_acc": None, "error": "boom"},
    ]
    summary = P.ablation_summary(rows)
    assert summary[0] == {"components": "Enc", "auc_roc": 0.6, "closed_set_acc": 30.0, "seeds": 3}
    assert summary[1]["auc_roc"] is None and summary[1]["seeds"] == 0
    assert "boom" in P.ablation_csv(rows)


def test_failed_row_does_not_stop_grid(toy_cfg, monkeypatch):
    calls = []

    def fake_pipeline(cfg, families):
        calls.append(cfg["model"]["dec"])
        raise RuntimeError("row failed")

    monkeypatch.setattr(P, "run_pipeline", lambda cfg, families=None: fake_pipeline(cfg, families))
    rows = P.ablate(toy_cfg(), P.ABLATION_GRID[:2], seeds=(0, 1))
    assert len(rows) == 4 and len(calls) == 4
    assert all(r["error"].startswith("RuntimeError") for r in rows)


def test_code_version_is_stable():
    assert P.code_version() == P.code_version() and len(P.code_version()) == 16
