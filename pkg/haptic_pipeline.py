#!/usr/bin/env python3
"""
Haptic Experiment Pipeline
Calibrates the simulated device, runs the tapping and staircase experiments
cell by cell, analyses the results and writes every artifact with a manifest
"""

import argparse
import logging
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import replace
from pathlib import Path
from threading import Lock
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd
from dotenv import load_dotenv

from ethd import __version__
from ethd.artifacts import ArtifactWriter, file_sha256
from ethd.calibration import (
    Compensator, before_after_table, closure_errors, compare_before_after, compensate, fit_quadratic, run_sweep,
    samples_to_frame,
)
from ethd.config import RunConfig, load_config
from ethd.contact_model import PlateSpec, load_plates, select_plate_subset, shore_to_modulus, simulate_session, \
    write_tap_signal
from ethd.device_sim import identity_device, load_device_params, simulate_trajectory, write_trajectory_csv
from ethd.dsp import FEATURE_COLUMNS, extract_features, features_row, read_tap_signal
from ethd.errors import (
    ArtifactIOError, ConfigError, DegenerateDataError, DomainError, EthdError, NumericError,
    ProtocolDeviationWarning,
)
from ethd.psychophysics import (
    PROTOCOL_REFERENCES, grid_to_frame, run_cell, summarize_grid, write_trial_log,
)
from ethd.seeding import derive_seed
from ethd.stats import (
    FactorialTable, format_report, group_values, one_way_anova, permutation_pairwise, two_way_anova,
)

logger = logging.getLogger("haptic_pipeline")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def describe_cell(cell) -> str:
    first, second = cell
    name = first.label if isinstance(first, PlateSpec) else first
    return f"plate={name} k={second:g}"


class ExperimentPipeline:
    """Runs independent experiment cells with optional parallel processing"""

    def __init__(self, max_workers: int = 4):
        """
        Args:
            max_workers: Maximum number of parallel workers (default: 4)
        """
        self.max_workers = max(1, max_workers)

        # Processing statistics
        self._stats = {
            'processed': 0,
            'failed': 0,
            'start_time': None
        }
        self._stats_lock = Lock()

    def _update_stats(self, result_type: str):
        """Thread-safe statistics update"""
        with self._stats_lock:
            if result_type in self._stats:
                self._stats[result_type] += 1

    @property
    def stats(self) -> Dict[str, Any]:
        with self._stats_lock:
            return dict(self._stats)

    def process_cell(self, index: int, cell, fn: Callable) -> Dict:
        """Run one cell; a failing cell is recorded, not raised"""
        result = {
            'index': index,
            'cell': cell,
            'success': False,
            'message': '',
            'value': None
        }
        try:
            result['value'] = fn(cell)
            result['success'] = True
            result['message'] = "ok"
            self._update_stats('processed')
        except EthdError as e:
            result['message'] = str(e)
            logger.error("Cell %s failed: %s", describe_cell(cell), e)
            self._update_stats('failed')
        except Exception as e:
            result['message'] = f"Processing error: {e}"
            logger.exception("Cell %s failed unexpectedly", describe_cell(cell))
            self._update_stats('failed')
        return result

    def run(self, cells: Sequence, fn: Callable, label: str, use_parallel: bool = True) -> List[Dict]:
        """Process all cells and return their results in cell order"""
        logger.info("=== Starting %s (%d cells) ===", label, len(cells))
        with self._stats_lock:
            self._stats = {
                'processed': 0,
                'failed': 0,
                'start_time': time.time()
            }

        if use_parallel and len(cells) > 1 and self.max_workers > 1:
            results = self._run_parallel(cells, fn)
        else:
            results = self._run_sequential(cells, fn)

        stats = self.stats
        elapsed = time.time() - stats['start_time']
        print(f"\n=== {label} Complete ===")
        print(f"Cells: {len(cells)}")
        print(f"Succeeded: {stats['processed']}")
        print(f"Failed: {stats['failed']}")
        print(f"Processing time: {elapsed:.2f} seconds")
        return results

    def _run_sequential(self, cells: Sequence, fn: Callable) -> List[Dict]:
        logger.info("Processing %d cells sequentially...", len(cells))
        results = []
        for i, cell in enumerate(cells):
            result = self.process_cell(i, cell, fn)
            results.append(result)
            logger.info("[%d/%d] %s %s", i + 1, len(cells), "✓" if result['success'] else "✗", describe_cell(cell))
        return results

    def _run_parallel(self, cells: Sequence, fn: Callable) -> List[Dict]:
        logger.info("Processing %d cells in parallel (%d workers)...", len(cells), self.max_workers)
        results = []

        try:
            with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                future_to_index = {
                    executor.submit(self.process_cell, i, cell, fn): i
                    for i, cell in enumerate(cells)
                }

                # Collect results as they complete
                completed_count = 0
                for future in as_completed(future_to_index):
                    completed_count += 1
                    index = future_to_index[future]
                    try:
                        result = future.result()
                    except Exception as e:
                        result = {
                            'index': index,
                            'cell': cells[index],
                            'success': False,
                            'message': f"Processing error: {e}",
                            'value': None
                        }
                        self._update_stats('failed')
                    results.append(result)
                    logger.info("[%d/%d] %s %s", completed_count, len(cells),
                                "✓" if result['success'] else "✗", describe_cell(cells[index]))

        except RuntimeError as e:
            logger.warning("Parallel processing error: %s; falling back to sequential processing", e)
            return self._run_sequential(cells, fn)

        # Completion order is nondeterministic; artifacts follow cell order
        results.sort(key=lambda r: r['index'])
        return results


def cmd_calibrate(config: RunConfig, writer: ArtifactWriter, pipeline: ExperimentPipeline,
                  args: argparse.Namespace) -> Dict:
    """Weight sweep, quadratic fit, compensated re-sweep and the comparison tables"""
    device = config.device
    cal = config.calibration
    sweep = dict(weight=cal.weight, k_start=cal.k_start, k_end=cal.k_end, step=cal.step, repeats=cal.repeats,
                 seed=config.seed, sensor_noise=cal.sensor_noise, settle_time=cal.settle_time, window=cal.window)

    before = run_sweep(device, **sweep)
    comp = fit_quadratic(before, cal.saturation_threshold)
    after = run_sweep(device, compensator=comp, **sweep)
    closure = closure_errors(device, comp)

    writer.write_table("calibration", samples_to_frame(before))
    writer.write_table("calibration_compensated", samples_to_frame(after))
    writer.write_json("compensator.json", comp.to_dict())
    writer.write_table("before_after", before_after_table(before, after))
    writer.write_table("stiffness_comparison", compare_before_after(device, comp))
    writer.write_table("closure", closure)
    trajectory = simulate_trajectory(device, compensate(comp, 1000.0), cal.weight, cal.settle_time + cal.window)
    writer.register(write_trajectory_csv(trajectory, writer.out_dir / "trajectory.csv"))

    a, b, c = comp.coeffs
    print("\n=== Calibration Complete ===")
    print(f"Compensator: k = {a:.4g}*k_des^2 + {b:.4g}*k_des + {c:.4g}")
    print(f"Residual RMS: {comp.residual_rms:.3g} N/m over {comp.n_samples} samples")
    print(f"Worst closure error (200-2000 N/m): {closure['rel_error'].max():.2%}")
    return {'coeffs': list(comp.coeffs), 'max_closure_error': float(closure['rel_error'].max())}


def _plate_summary(features: pd.DataFrame, plates: Sequence[PlateSpec]) -> pd.DataFrame:
    by_label = {p.label: p for p in plates}
    rows = []
    for label, group in features.groupby("plate", sort=False):
        plate = by_label[label]
        sc = group["sc_Hz"]
        rows.append({
            "plate": label,
            "shore_scale": plate.shore_scale.value,
            "shore_value": plate.shore_value,
            "category": plate.category,
            "modulus_MPa": shore_to_modulus(plate) / 1e6,
            "sc_mean_Hz": sc.mean(),
            "sc_std_Hz": sc.std(ddof=1) if len(sc) > 1 else 0.0,
            "sc_spread_rel": (sc.max() - sc.min()) / sc.mean(),
            "sc_mag_mean": group["sc_mag"].mean(),
            "domfreq_mean_Hz": group["domfreq_Hz"].mean(),
            "duration_mean_ms": group["duration_ms"].mean(),
        })
    return pd.DataFrame(rows)


def _grid(features: pd.DataFrame, value: str, plate_order: Sequence[str]) -> pd.DataFrame:
    grid = features.pivot(index="k_des_Npm", columns="plate", values=value)
    grid = grid[[p for p in plate_order if p in grid.columns]]
    grid.columns.name = None
    return grid.reset_index()


def _two_way(frame: pd.DataFrame, a: str, b: str, value: str, names: Sequence[str],
             interaction: bool = False):
    table = FactorialTable.from_frame(frame, a, b, value)
    table.factor_a_name, table.factor_b_name = names
    if interaction and table.replicates() < 2:
        interaction = False
    return two_way_anova(table, interaction=interaction)


def cmd_experiment1(config: RunConfig, writer: ArtifactWriter, pipeline: ExperimentPipeline,
                    args: argparse.Namespace) -> Dict:
    """Tap sessions over plates x rendered stiffness, spectral features and their ANOVA"""
    exp = config.experiment1
    plates = load_plates(exp.plate_set)
    stiffnesses = exp.stiffness_grid()
    try:
        comp = Compensator.from_json(exp.compensator) if exp.compensator else None
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"Could not load compensator {exp.compensator}: {e}") from e

    def simulate(cell):
        plate, k = cell
        seed = derive_seed(config.seed, "exp1", plate.label, k)
        signal = simulate_session(plate, k, exp.n_taps, config.profile, exp.duration, seed,
                                  config.device, exp.sample_rate, comp)
        analysis = extract_features(signal, (exp.crop_start, exp.crop_end),
                                    min_separation=exp.min_separation, window=exp.dft_window)
        if exp.save_signals:
            path = write_tap_signal(writer.out_dir / "signals" / f"{plate.label}_{k:g}.csv", signal)
            writer.register(path)
            writer.register(path.with_suffix(".json"))
        row = features_row(plate.label, k, analysis.features)
        row["n_taps"] = analysis.n_taps
        return row

    cells = [(plate, k) for plate in plates for k in stiffnesses]
    results = pipeline.run(cells, simulate, "Experiment 1", use_parallel=not args.sequential)
    failed = [r for r in results if not r['success']]
    features = pd.DataFrame([r['value'] for r in results if r['success']], columns=FEATURE_COLUMNS + ["n_taps"])
    if features.empty:
        raise NumericError("no Experiment 1 cell succeeded", {"cells": len(cells)})

    order = [p.label for p in plates]
    summary = _plate_summary(features, plates)
    writer.write_table("features", features)
    writer.write_table("sc_by_plate", summary)
    writer.write_table("sc_vs_stiffness", _grid(features, "sc_Hz", order))
    writer.write_table("domfreq_grid", _grid(features, "domfreq_Hz", order))

    if len(summary) >= exp.selection_levels:
        chosen = select_plate_subset(dict(zip(summary["plate"], summary["sc_mean_Hz"])), exp.selection_levels)
        sc_mean = dict(zip(summary["plate"], summary["sc_mean_Hz"]))
        writer.write_table("plate_selection", pd.DataFrame({
            "level": range(1, len(chosen) + 1),
            "plate": chosen,
            "sc_mean_Hz": [sc_mean[p] for p in chosen],
        }))

    report = []
    if features["plate"].nunique() < 2 or features["k_des_Npm"].nunique() < 2:
        logger.warning("ANOVA skipped: needs at least 2 plates and 2 stiffness levels")
        print("ANOVA skipped: needs at least 2 plates and 2 stiffness levels")
    else:
        for value in ("sc_Hz", "domfreq_Hz", "dommag"):
            try:
                anova = _two_way(features, "plate", "k_des_Npm", value, ("hardness", "stiffness"))
            except (DomainError, DegenerateDataError) as e:
                logger.warning("ANOVA on %s skipped: %s", value, e)
                continue
            writer.write_table(f"anova_{value}", anova.to_frame())
            report.append(f"[{value}]\n{format_report(anova)}")
        if report:
            writer.write_text("anova_report.txt", "\n\n".join(report))

    print("\n=== Experiment 1 Summary ===")
    for row in summary.itertuples(index=False):
        print(f"{row.plate:>5}  SC {row.sc_mean_Hz:8.1f} Hz  spread {row.sc_spread_rel:6.2%}")
    for block in report:
        print(block)
    if failed:
        print(f"Skipped cells: {len(failed)}")
    return {'cells': len(cells), 'failed': len(failed)}


def _one_way_rows(name: str, groups: Dict, report: List[str], rows: List[Dict]):
    usable = {k: v for k, v in groups.items() if len(v) >= 2}
    if len(usable) < 2:
        logger.warning("One-way ANOVA '%s' skipped: fewer than 2 groups with 2+ values", name)
        return
    try:
        anova = one_way_anova(list(usable.values()), name=name)
    except (DomainError, DegenerateDataError) as e:
        logger.warning("One-way ANOVA '%s' skipped: %s", name, e)
        return
    row = anova.effects[0]
    rows.append({"analysis": name, "SS": row.ss, "df": row.df, "df_residual": anova.residual.df,
                 "F": row.f, "p": row.p})
    report.append(format_report(anova))


def _balanced_subset(frame: pd.DataFrame, keys: Sequence[str]) -> pd.DataFrame:
    """Keep the first n runs of every cell, n being the smallest cell"""
    n = frame.groupby(list(keys)).size().min()
    return frame.groupby(list(keys), sort=False).head(n)


def cmd_experiment2(config: RunConfig, writer: ArtifactWriter, pipeline: ExperimentPipeline,
                    args: argparse.Namespace) -> Dict:
    """Staircase grid over plates x reference stiffness with simulated observers"""
    exp = config.experiment2
    for reference in exp.references:
        if reference not in PROTOCOL_REFERENCES:
            warnings.warn(f"reference {reference:g} N/m is not one of {PROTOCOL_REFERENCES}",
                          ProtocolDeviationWarning)
            logger.warning("Reference %g N/m deviates from the protocol set; running anyway", reference)

    def simulate(cell):
        plate, reference = cell
        return run_cell(plate, reference, config.observer.observer, exp.runs_per_cell, config.seed,
                        config.staircase, config.profile)

    cells = [(plate, float(reference)) for plate in exp.plates for reference in exp.references]
    results = pipeline.run(cells, simulate, "Experiment 2", use_parallel=not args.sequential)
    runs = [run for r in results if r['success'] for run in r['value']]

    frame = grid_to_frame(runs)
    writer.write_table("weber_runs", frame)
    writer.write_table("weber_summary", summarize_grid(runs))
    if exp.trial_logs or exp.runs_per_cell == 1:
        for run in runs:
            path = writer.out_dir / "trial_logs" / f"{run.plate}_{run.reference_k:g}_{run.run}.csv"
            writer.register(write_trial_log(path, run.state))

    converged = frame[frame["converged"]]
    nonconverged = len(frame) - len(converged)
    report, one_way_rows = [], []
    if not converged.empty:
        stats_of = lambda key: converged.groupby(key, sort=False)["weber_fraction"].agg(
            mean_wf="mean", std_wf="std", n="count").reset_index()
        writer.write_table("wf_by_plate", stats_of("plate"))
        writer.write_table("wf_by_reference", stats_of("ref_k"))
        writer.write_table("wf_by_duration", stats_of("duration_class"))

        if converged["plate"].nunique() >= 2 and converged["ref_k"].nunique() >= 2:
            balanced = _balanced_subset(converged, ["plate", "ref_k"])
            try:
                anova = _two_way(balanced, "plate", "ref_k", "weber_fraction", ("hardness", "reference"),
                                 interaction=config.stats.interaction)
                writer.write_table("anova_wf", anova.to_frame())
                report.append(format_report(anova))
            except (DomainError, DegenerateDataError) as e:
                logger.warning("Two-way ANOVA on Weber fraction skipped: %s", e)

        for plate, group in converged.groupby("plate", sort=False):
            _one_way_rows(f"reference within {plate}", group_values(group, "ref_k", "weber_fraction"),
                          report, one_way_rows)
        _one_way_rows("reference", group_values(converged, "ref_k", "weber_fraction"), report, one_way_rows)
        _one_way_rows("tap duration", group_values(converged, "duration_class", "weber_fraction"),
                      report, one_way_rows)
        if one_way_rows:
            writer.write_table("anova_one_way", pd.DataFrame(one_way_rows))

        for key, stem in (("plate", "pairwise_plates"), ("ref_k", "pairwise_references"),
                          ("duration_class", "pairwise_durations")):
            groups = {k: v for k, v in group_values(converged, key, "weber_fraction").items() if len(v) >= 2}
            if len(groups) < 2:
                continue
            pairwise = permutation_pairwise(list(groups.values()), config.stats.n_perm,
                                            derive_seed(config.seed, "exp2", stem),
                                            labels=[str(k) for k in groups])
            writer.write_table(stem, pairwise.to_frame())

    if report:
        writer.write_text("anova_report.txt", "\n".join(report))

    print("\n=== Experiment 2 Summary ===")
    print(f"Runs: {len(frame)}  converged: {len(converged)}  nonconverged: {nonconverged}")
    if not converged.empty:
        means = converged.groupby(["plate", "ref_k"], sort=False)["weber_fraction"].mean()
        for (plate, reference), wf in means.items():
            print(f"{plate:>4} @ {reference:6g} N/m  WF {wf:.3f}")
    for line in report:
        print(line)
    return {'runs': len(frame), 'nonconverged': nonconverged}


def cmd_analyze(config: RunConfig, writer: ArtifactWriter, pipeline: ExperimentPipeline,
                args: argparse.Namespace) -> Dict:
    """Spectral features of one recorded `t_s, force_N` signal"""
    exp = config.experiment1
    signal = read_tap_signal(args.signal)
    crop_window = (exp.crop_start, exp.crop_end)
    if signal.duration < exp.crop_end:
        logger.warning("Signal lasts %.2f s, shorter than the crop window; analysing all of it", signal.duration)
        crop_window = None
    analysis = extract_features(signal, crop_window, min_separation=exp.min_separation, window=exp.dft_window)
    row = features_row(signal.meta.get("plate", Path(args.signal).stem),
                       signal.meta.get("k_des_Npm", float("nan")), analysis.features)
    row["n_taps"] = analysis.n_taps
    writer.write_table("features", pd.DataFrame([row], columns=FEATURE_COLUMNS + ["n_taps"]))

    f = analysis.features
    print("\n=== Tap Analysis ===")
    print(f"Taps detected: {analysis.n_taps}")
    print(f"Spectral centroid: {f.spectral_centroid:.1f} Hz (magnitude {f.sc_magnitude:.4g})")
    print(f"Dominant frequency: {f.dominant_freq:.1f} Hz (magnitude {f.dominant_mag:.4g})")
    print(f"Tap duration: {f.duration * 1000:.1f} ms ({f.duration_class.value})")
    return {'input': str(args.signal), 'input_sha256': file_sha256(args.signal)}


def cmd_stats(config: RunConfig, writer: ArtifactWriter, pipeline: ExperimentPipeline,
              args: argparse.Namespace) -> Dict:
    """ANOVA on a long-format `factor_a[, factor_b], value` table"""
    try:
        frame = pd.read_csv(args.table)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f"Could not parse {args.table}: {e}") from e
    missing = {"factor_a", "value"} - set(frame.columns)
    if missing:
        raise ConfigError(f"{args.table} lacks columns {sorted(missing)}")

    if "factor_b" in frame.columns:
        anova = _two_way(frame, "factor_a", "factor_b", "value", ("factor_a", "factor_b"),
                         interaction=config.stats.interaction)
    else:
        anova = one_way_anova(list(group_values(frame, "factor_a", "value").values()), name="factor_a")
    writer.write_table("anova", anova.to_frame())
    writer.write_text("anova_report.txt", format_report(anova))

    print("\n=== ANOVA ===")
    print(format_report(anova))
    return {'input': str(args.table), 'input_sha256': file_sha256(args.table)}


COMMANDS = {
    'calibrate': cmd_calibrate,
    'exp1': cmd_experiment1,
    'exp2': cmd_experiment2,
    'analyze': cmd_analyze,
    'stats': cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="haptic_pipeline",
                                     description="Encountered-type haptic display simulator and analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON config file (or a manifest.json to rerun)")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--format", choices=["csv", "json"], help="tabular artifact format")
    parser.add_argument("--max-workers", type=int, help="parallel workers for grid commands")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--sequential", action="store_true", help="process cells one at a time")

    sub = parser.add_subparsers(dest="command", required=True)
    calibrate = sub.add_parser("calibrate", help="sweep, fit and check the stiffness compensator")
    calibrate.add_argument("--device", default="default",
                           help="default, identity (no saturation) or a device JSON file")
    exp1 = sub.add_parser("exp1", help="tap sessions and spectral-centroid analysis")
    exp1.add_argument("--plates", choices=["table1", "table2"], help="plate set")
    exp2 = sub.add_parser("exp2", help="staircase Weber-fraction grid")
    exp2.add_argument("--runs-per-cell", type=int)
    analyze = sub.add_parser("analyze", help="features of one t_s,force_N signal")
    analyze.add_argument("signal")
    stats = sub.add_parser("stats", help="ANOVA on a factor_a[,factor_b],value table")
    stats.add_argument("table")
    return parser


def _apply_command_flags(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    device = getattr(args, 'device', 'default')
    if device == 'identity':
        config = replace(config, device=identity_device())
    elif device != 'default':
        config = replace(config, device=load_device_params(device))
    if getattr(args, 'plates', None):
        config = replace(config, experiment1=replace(config.experiment1, plate_set=args.plates))
    runs = getattr(args, 'runs_per_cell', None)
    if runs is not None:
        if runs < 0:
            raise ConfigError("--runs-per-cell must be nonnegative")
        config = replace(config, experiment2=replace(config.experiment2, runs_per_cell=runs))
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI interface for the haptic experiment pipeline"""
    load_dotenv()
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config, seed=args.seed, out_dir=args.out_dir, format=args.format,
                             max_workers=args.max_workers, log_level=args.log_level)
        config = _apply_command_flags(config, args)
        level = logging.getLevelName(config.log_level.upper())
        if not isinstance(level, int):
            raise ConfigError(f"Unknown log level {config.log_level!r}")
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    logger.info("haptic_pipeline %s: %s (seed %d) -> %s", __version__, args.command, config.seed, config.out_dir)

    try:
        writer = ArtifactWriter(config.out_dir, config.format)
        pipeline = ExperimentPipeline(config.max_workers)
        summary = COMMANDS[args.command](config, writer, pipeline, args)
        writer.write_manifest(args.command, config.to_dict(), config.seed, extra={'summary': summary})
    except ConfigError as e:
        logger.error("Config error: %s", e)
        return EXIT_CONFIG
    except (ArtifactIOError, OSError) as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except EthdError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_NUMERIC

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
