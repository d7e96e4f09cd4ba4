"""Command-line front end.

Subcommands: ``transfer`` (reference + target files -> transfer document),
``verify`` (run a verification plan), ``sde`` (optimizer-proxy simulations),
and ``parse`` (layout notation -> block document). Machine-readable JSON
documents go to ``--out`` (stdout by default); human-readable summaries go
to stderr. All randomness flows from ``--seed`` through split streams, so
identical inputs and seed produce byte-identical outputs.

Exit codes: 0 all checks passed (or nothing to check), 1 checks ran and
failed, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from typing import Any, Sequence

from .config import (
    ConfigError,
    RouterKind,
    active_width,
    block_to_dict,
    dumps,
    model_from_dict,
    parse_moe_notation,
    reference_from_dict,
    schedule_from_dict,
)
from .rng import DEFAULT_SEED, Rng
from .rules import compose_transfer, transfer_result_to_dict
from .sde import (
    activated_expert_transfer,
    case1_batch_transfer,
    case2_fixed_iterations,
    discrete_config_from_dict,
    ou_moments,
    sde_config_from_dict,
    sde_config_to_dict,
    simulate_sde_path,
    stats_to_dict,
)
from .verify import (
    bridge_suite,
    default_plan,
    plan_from_dict,
    report_table,
    report_to_dict,
)

__all__ = ["main"]


def _read_json(path: str, label: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(label, f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(label, f"invalid JSON in {path}: {exc}") from None


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError("set", f"override must look like key.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    segments = [s for s in key.strip().split(".") if s]
    if not segments:
        raise ConfigError("set", f"empty override path in {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return segments, value


def _apply_overrides(doc: Any, overrides: Sequence[str]) -> Any:
    for item in overrides:
        segments, value = _parse_override(item)
        node = doc
        trail = []
        for seg in segments[:-1]:
            trail.append(seg)
            if isinstance(node, list):
                try:
                    node = node[int(seg)]
                except (ValueError, IndexError):
                    raise ConfigError(".".join(trail), "no such element") from None
            elif isinstance(node, dict):
                if seg not in node:
                    raise ConfigError(".".join(trail), "no such field")
                node = node[seg]
            else:
                raise ConfigError(".".join(trail), "cannot descend into a scalar")
        last = segments[-1]
        if isinstance(node, list):
            try:
                node[int(last)] = value
            except (ValueError, IndexError):
                raise ConfigError(".".join(segments), "no such element") from None
        elif isinstance(node, dict):
            node[last] = value
        else:
            raise ConfigError(".".join(segments), "cannot assign into a scalar")
    return doc


def _cmd_parse(args: argparse.Namespace) -> int:
    block = parse_moe_notation(
        args.notation,
        h=args.h,
        shared_width=args.shared,
        router=RouterKind(args.router),
    )
    doc = {"block": block_to_dict(block), "active_width": active_width(block)}
    _write_text(args.out, dumps(doc))
    print(f"{args.notation}: active width {active_width(block)}", file=sys.stderr)
    return 0


def _cmd_transfer(args: argparse.Namespace) -> int:
    reference = reference_from_dict(_read_json(args.reference, "reference"), "reference")
    target_doc = _apply_overrides(_read_json(args.target, "target"), args.set or [])
    if not isinstance(target_doc, dict):
        raise ConfigError("target", "target document must be an object")
    if "model" not in target_doc:
        raise ConfigError("model", "missing field")
    if "schedule" not in target_doc:
        raise ConfigError("schedule", "missing field")
    model = model_from_dict(target_doc["model"], "model")
    schedule = schedule_from_dict(target_doc["schedule"], "schedule")
    result = compose_transfer(reference, model, schedule)
    _write_text(args.out, dumps(transfer_result_to_dict(result)))
    diag = result.diagnostics
    print(
        f"transfer: rho_d={diag.rho_d:g} rho_H_act={diag.rho_H_act:g} "
        f"rho_B={diag.rho_B:g} rho_D={diag.rho_D:g} sigma0_ratio={diag.sigma0_ratio:g}",
        file=sys.stderr,
    )
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    if args.plan is not None:
        plan_doc = _apply_overrides(_read_json(args.plan, "plan"), args.set or [])
        plan = plan_from_dict(plan_doc, "plan")
    else:
        if args.set:
            raise ConfigError("set", "overrides need an explicit --plan file")
        plan = default_plan()
    reports = bridge_suite(plan, Rng(args.seed))
    doc = report_to_dict(reports)
    _write_text(args.out, dumps(doc))
    if args.table is not None:
        _write_text(args.table, report_table(reports))
    for report in reports:
        mark = "ok" if report.passed else "FAIL"
        print(f"[{mark}] {report.quantity}: ratio={report.ratio:.4f} tol={report.tolerance:.4f}", file=sys.stderr)
    return 0 if doc["all_pass"] else 1


def _sde_oracle(config: dict[str, Any], rng: Rng, table: str | None) -> tuple[dict[str, Any], bool]:
    cfg = sde_config_from_dict(config, "config")
    stats, rows = simulate_sde_path(cfg, rng)
    mean, var = ou_moments(cfg.sigma0, cfg.lambda_tilde, cfg.gbar, cfg.theta0, cfg.horizon)
    ok = (
        abs(stats.terminal_mean - mean) <= 3.0 * stats.mean_std_error
        and abs(stats.terminal_var - var) <= 3.0 * stats.var_std_error
    )
    if table is not None:
        lines = ["tau\tmean\tvar"] + [f"{t:.10g}\t{m:.10g}\t{v:.10g}" for t, m, v in rows]
        _write_text(table, "\n".join(lines) + "\n")
    doc = {
        "mode": "oracle",
        "config": sde_config_to_dict(cfg),
        "simulated": stats_to_dict(stats),
        "closed_form": {"terminal_mean": mean, "terminal_var": var},
        "pass": ok,
    }
    return doc, ok


def _cmd_sde(args: argparse.Namespace) -> int:
    config = _apply_overrides(_read_json(args.config, "config"), args.set or [])
    if not isinstance(config, dict):
        raise ConfigError("config", "config document must be an object")
    rng = Rng(args.seed)

    if args.mode == "oracle":
        doc, ok = _sde_oracle(config, rng, args.table)
    elif args.mode in ("case1", "case2"):
        base = discrete_config_from_dict(config, "config")
        kappa = float(config.get("kappa_B", 4.0))
        if args.mode == "case1":
            result = case1_batch_transfer(base, kappa, rng, common_noise=bool(config.get("common_noise", False)))
            ok = result.match
            doc = {
                "mode": "case1",
                "kappa_B": kappa,
                "base": stats_to_dict(result.base),
                "transferred": stats_to_dict(result.transferred),
                "match": result.match,
                "pass": ok,
            }
        else:
            result = case2_fixed_iterations(base, kappa, rng)
            ok = result.horizon_ratio == 1.0 and abs(result.sigma0_ratio - 1.0 / math.sqrt(kappa)) <= 1e-12
            doc = {
                "mode": "case2",
                "kappa_B": kappa,
                "sigma0_ratio": result.sigma0_ratio,
                "horizon_ratio": result.horizon_ratio,
                "base": stats_to_dict(result.base),
                "transferred": stats_to_dict(result.transferred),
                "pass": ok,
            }
    elif args.mode == "activated":
        base = discrete_config_from_dict(config, "config")
        try:
            a, a_prime = int(config["a"]), int(config["a_prime"])
            n_exp, batch = int(config["N"]), int(config["B"])
        except KeyError as exc:
            raise ConfigError(f"config.{exc.args[0]}", "missing field") from None
        result = activated_expert_transfer(
            base, a, a_prime, n_exp, batch, rng,
            loads=config.get("loads"), loads_prime=config.get("loads_prime"),
        )
        ok = result.eta_ratio == 1.0 and result.sigma0_ratio == math.sqrt(a / a_prime)
        doc = {
            "mode": "activated",
            "a": a,
            "a_prime": a_prime,
            "eta_ratio": result.eta_ratio,
            "sigma0_ratio": result.sigma0_ratio,
            "base": stats_to_dict(result.base),
            "transferred": stats_to_dict(result.transferred),
            "pass": ok,
        }
        if result.per_expert_eta_ratio is not None:
            doc["per_expert_eta_ratio"] = [float(x) for x in result.per_expert_eta_ratio]
            doc["per_expert_sigma0_ratio"] = [float(x) for x in result.per_expert_sigma0_ratio]
    else:  # pragma: no cover - argparse rejects unknown modes first
        raise ConfigError("mode", f"unknown mode {args.mode!r}")

    _write_text(args.out, dumps(doc))
    print(f"sde {args.mode}: {'pass' if ok else 'FAIL'}", file=sys.stderr)
    return 0 if ok else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-transfer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="root seed for all randomness")
        p.add_argument("--out", default=None, help="output document path (default: stdout)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")

    p_parse = sub.add_parser("parse", help="parse layout notation into a block document")
    p_parse.add_argument("notation")
    p_parse.add_argument("h", type=int, help="per-expert width")
    p_parse.add_argument("shared", type=int, nargs="?", default=None, help="shared-branch width")
    p_parse.add_argument("--router", choices=[k.value for k in RouterKind], default="softmax")
    common(p_parse)
    p_parse.set_defaults(func=_cmd_parse)

    p_transfer = sub.add_parser("transfer", help="transfer a dense reference onto a target")
    p_transfer.add_argument("reference", help="reference configuration file")
    p_transfer.add_argument("target", help="target file with model and schedule")
    common(p_transfer)
    p_transfer.set_defaults(func=_cmd_transfer)

    p_verify = sub.add_parser("verify", help="run a Monte-Carlo verification plan")
    p_verify.add_argument("--plan", default=None, help="plan file (default: built-in plan)")
    p_verify.add_argument("--table", default=None, help="also write a tab-separated summary here")
    common(p_verify)
    p_verify.set_defaults(func=_cmd_verify)

    p_sde = sub.add_parser("sde", help="run an optimizer-proxy simulation")
    p_sde.add_argument("config", help="simulation configuration file")
    p_sde.add_argument("--mode", choices=["oracle", "case1", "case2", "activated"], required=True)
    p_sde.add_argument("--table", default=None, help="also write checkpoint rows here (oracle mode)")
    common(p_sde)
    p_sde.set_defaults(func=_cmd_sde)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
