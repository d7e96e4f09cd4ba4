"""CLI contract: documents, exit codes, determinism."""

import json

import pytest

from moe_transfer.cli import main
from moe_transfer.config import dumps, reference_to_dict
from moe_transfer.verify import negative_control_plan, plan_to_dict
from tests.test_config import make_reference

TINY_PLAN = {
    "checks": [
        {
            "kind": "forward_variance",
            "label": "tiny",
            "lhs": {"label": "moe", "notation": "4e4a", "h": 16, "d": 64},
            "rhs": {"label": "dense", "block": {"kind": "dense_ffn", "H": 64}, "d": 64},
            "n": 2000,
            "replicates": 2,
            "tolerance": 0.08,
        }
    ]
}


def write(path, doc):
    path.write_text(dumps(doc) if isinstance(doc, dict) else doc)
    return str(path)


def target_doc(d=128, L=32, block=None, B=128, T=25000):
    block = block or {"kind": "dense_ffn", "H": 128}
    return {"model": {"d": d, "L": L, "block": block}, "schedule": {"B": B, "T": T}}


@pytest.fixture
def reference_file(tmp_path):
    return write(tmp_path / "reference.json", reference_to_dict(make_reference()))


class TestParse:
    def test_shared_layout_active_width(self, tmp_path, capsys):
        out = tmp_path / "block.json"
        code = main(["parse", "128e8a1s", "512", "512", "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["active_width"] == 4608
        assert doc["block"]["kind"] == "hybrid"

    def test_plain_sparse_active_width(self, tmp_path):
        out = tmp_path / "block.json"
        assert main(["parse", "64e8a", "16", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["active_width"] == 128

    def test_grouped_divisibility(self, tmp_path):
        out = tmp_path / "block.json"
        assert main(["parse", "64e8a2g", "16", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert len(doc["block"]["routed_groups"]) == 2

    def test_bad_notation_exits_two(self, capsys):
        assert main(["parse", "8e9a", "4"]) == 2
        assert "error" in capsys.readouterr().err


class TestTransfer:
    def test_identity_reports_unit_multipliers(self, tmp_path, reference_file):
        target = write(tmp_path / "target.json", target_doc())
        out = tmp_path / "result.json"
        assert main(["transfer", reference_file, target, "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["layer"]["A"] == 1.0 and doc["layer"]["R"] == 1.0
        assert doc["global"]["eta_factor"] == 1.0
        assert doc["diagnostics"]["rho_d"] == 1.0
        assert doc["per_group"]["down_projection"]["lr"] == 1e-3

    def test_large_run_pair(self, tmp_path, reference_file):
        block = {
            "kind": "hybrid",
            "dense_branches": [512],
            "routed_groups": [{"N_g": 32, "h_g": 512}] * 4,
            "a": 8,
            "router": "sigmoid",
        }
        target = write(tmp_path / "target.json", target_doc(d=1024, block=block))
        out = tmp_path / "result.json"
        assert main(["transfer", reference_file, target, "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["diagnostics"]["rho_d"] == 8.0
        assert doc["diagnostics"]["rho_H_act"] == 4.5
        assert doc["layer"]["R"] == 8.0

    def test_invalid_block_exits_two_with_field_path(self, tmp_path, reference_file, capsys):
        block = {"kind": "sparse_moe", "N": 8, "a": 9, "h": 4, "router": "softmax"}
        target = write(tmp_path / "target.json", target_doc(block=block))
        assert main(["transfer", reference_file, target]) == 2
        assert "block.a" in capsys.readouterr().err

    def test_override_applies_to_target(self, tmp_path, reference_file):
        block = {"kind": "sparse_moe", "N": 64, "a": 8, "h": 16, "router": "softmax"}
        target = write(tmp_path / "target.json", target_doc(block=block))
        out = tmp_path / "result.json"
        assert main(["transfer", reference_file, target, "--set", "model.block.a=16", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["layer"]["R"] == 16.0

    def test_bad_override_path_exits_two(self, tmp_path, reference_file, capsys):
        target = write(tmp_path / "target.json", target_doc())
        assert main(["transfer", reference_file, target, "--set", "model.nope.a=1"]) == 2
        assert "no such field" in capsys.readouterr().err


class TestVerify:
    def test_default_plan_with_default_seed_passes(self, tmp_path):
        out = tmp_path / "report.json"
        assert main(["verify", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["all_pass"] is True
        assert len(doc["checks"]) >= 12

    def test_tiny_plan_passes(self, tmp_path):
        plan = write(tmp_path / "plan.json", TINY_PLAN)
        out = tmp_path / "report.json"
        table = tmp_path / "report.tsv"
        code = main(["verify", "--plan", plan, "--out", str(out), "--table", str(table), "--seed", "7"])
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["all_pass"] is True
        assert table.read_text().startswith("quantity\t")

    def test_control_plan_fails_with_exit_one(self, tmp_path):
        plan = write(tmp_path / "plan.json", plan_to_dict(negative_control_plan(forward_n=4000, update_n=1000)))
        out = tmp_path / "report.json"
        assert main(["verify", "--plan", plan, "--out", str(out), "--seed", "7"]) == 1
        doc = json.loads(out.read_text())
        assert doc["all_pass"] is False
        assert all(not c["pass"] for c in doc["checks"])

    def test_empty_plan_exits_zero(self, tmp_path):
        plan = write(tmp_path / "plan.json", {"checks": []})
        out = tmp_path / "report.json"
        assert main(["verify", "--plan", plan, "--out", str(out)]) == 0
        assert json.loads(out.read_text()) == {"checks": [], "all_pass": True}

    def test_broken_plan_exits_two(self, tmp_path, capsys):
        plan = write(tmp_path / "plan.json", {"checks": [{"kind": "nonsense", "lhs": {}}]})
        assert main(["verify", "--plan", plan]) == 2
        assert "error" in capsys.readouterr().err

    def test_deterministic_output_bytes(self, tmp_path):
        plan = write(tmp_path / "plan.json", TINY_PLAN)
        out_a, out_b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["verify", "--plan", plan, "--out", str(out_a), "--seed", "11"]) == 0
        assert main(["verify", "--plan", plan, "--out", str(out_b), "--seed", "11"]) == 0
        assert out_a.read_bytes() == out_b.read_bytes()


SDE_CONFIG = {
    "eta": 0.01,
    "lam": 0.001,
    "sigma_exp": 1.0,
    "gbar": 1.0,
    "T": 2000,
    "n_traj": 4000,
    "theta0": 0.0,
    "kappa_B": 4,
}


class TestSde:
    def test_oracle_mode(self, tmp_path):
        config = write(
            tmp_path / "sde.json",
            {"sigma0": 1.0, "lambda_tilde": 1.0, "horizon": 2.0, "gbar": 1.0, "n_steps": 500, "n_traj": 5000},
        )
        out = tmp_path / "stats.json"
        table = tmp_path / "path.tsv"
        assert main(["sde", config, "--mode", "oracle", "--out", str(out), "--table", str(table)]) == 0
        doc = json.loads(out.read_text())
        assert doc["pass"] is True
        assert "closed_form" in doc
        assert table.read_text().startswith("tau\t")

    def test_case1_matches(self, tmp_path):
        config = write(tmp_path / "sde.json", SDE_CONFIG)
        out = tmp_path / "stats.json"
        assert main(["sde", config, "--mode", "case1", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["match"] is True

    def test_case2_ratios(self, tmp_path):
        config = write(tmp_path / "sde.json", SDE_CONFIG)
        out = tmp_path / "stats.json"
        assert main(["sde", config, "--mode", "case2", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["sigma0_ratio"] == 0.5 and doc["horizon_ratio"] == 1.0

    def test_activated_mode(self, tmp_path):
        config = write(tmp_path / "sde.json", {**SDE_CONFIG, "a": 8, "a_prime": 16, "N": 64, "B": 128, "T": 200, "n_traj": 400})
        out = tmp_path / "stats.json"
        assert main(["sde", config, "--mode", "activated", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["eta_ratio"] == 1.0
        assert doc["sigma0_ratio"] == pytest.approx(0.7071067811865476, rel=0, abs=0)

    def test_invalid_mode_exits_two(self, tmp_path, capsys):
        config = write(tmp_path / "sde.json", SDE_CONFIG)
        with pytest.raises(SystemExit) as err:
            main(["sde", config, "--mode", "banana"])
        assert err.value.code == 2

    def test_missing_field_exits_two(self, tmp_path, capsys):
        config = write(tmp_path / "sde.json", {"eta": 0.01})
        assert main(["sde", config, "--mode", "case1"]) == 2
        assert "config." in capsys.readouterr().err

    def test_deterministic_output_bytes(self, tmp_path):
        config = write(tmp_path / "sde.json", {**SDE_CONFIG, "T": 400, "n_traj": 500})
        out_a, out_b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["sde", config, "--mode", "case1", "--out", str(out_a), "--seed", "3"]) == 0
        assert main(["sde", config, "--mode", "case1", "--out", str(out_b), "--seed", "3"]) == 0
        assert out_a.read_bytes() == out_b.read_bytes()
