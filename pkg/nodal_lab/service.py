import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from nodal_lab import __version__
from nodal_lab.config import get_settings
from nodal_lab.covariance.base import CovarianceModel
from nodal_lab.covariance.factory import build_model
from nodal_lab.errors import ConfigError, InsufficientSamples, NodalLabError
from nodal_lab.fields import FieldFunction, sample_field
from nodal_lab.geometry import MAX_SPHERE_LEVEL, Domain, DomainKind, GridChart, make_domain
from nodal_lab.kacrice import (
    derivative_norm_sq_expectation,
    expected_boundary_volume,
    expected_volume,
    second_moment,
)
from nodal_lab.law import estimate_law, run_ensemble
from nodal_lab.logger import logger
from nodal_lab.morse import level_profile, profile_continuity, segment_scan
from nodal_lab.nodal import component_count, extract_nodal_set, nodal_volume
from nodal_lab.schemas import Command, OutputFormat, RunConfig, RunMetadata
from nodal_lab.tasks import member_seeds
from nodal_lab.variation import cm_norm_sq, fd_first_variation, first_variation


@dataclass
class RunResult:
    """What a subcommand hands back for writing: a JSON payload and a table."""

    payload: dict[str, Any]
    header: list[str] = field(default_factory=list)
    rows: list[list[Any]] = field(default_factory=list)
    normalization: Optional[str] = None
    omissions: list[str] = field(default_factory=list)


def chart_resolution(kind: DomainKind, resolution: int) -> int:
    """Sphere runs read large resolutions as cells per axis and map them to a mesh level."""
    if kind != DomainKind.SPHERE2 or resolution <= MAX_SPHERE_LEVEL:
        return resolution
    return int(np.clip(int(math.log2(resolution)) - 1, 1, MAX_SPHERE_LEVEL))


def build_domain(config: RunConfig, resolution: Optional[int] = None) -> tuple[Domain, GridChart]:
    spec = config.domain
    return make_domain(
        spec.kind,
        spec.dims,
        spec.extents,
        chart_resolution(spec.kind, resolution or config.resolution),
        spec.origin,
    )


def _model(config: RunConfig, domain: Domain, required: bool = True) -> Optional[CovarianceModel]:
    if config.model is None:
        if required:
            raise ConfigError(
                f"command {config.command.value} needs a model", "cli", "dispatch"
            )
        return None
    return build_model(config.model.name.value, config.model.params, domain)


def _subject(config: RunConfig, domain: Domain) -> tuple[FieldFunction, Optional[CovarianceModel]]:
    """The deterministic fixture if one is configured, else a seeded model sample."""
    if config.field is not None:
        return config.field.build(), _model(config, domain, required=False)
    model = _model(config, domain)
    return sample_field(model, config.seed), model


def _omissions(domain: Domain) -> list[str]:
    if domain.has_boundary:
        return ["corner and edge neighbourhoods of the Rectangle are not sampled by face quadrature"]
    return []


def run_volume(config: RunConfig) -> RunResult:
    domain, chart = build_domain(config)
    f, model = _subject(config, domain)
    rows = []
    previous_gap = None
    previous = None
    for level in range(config.refinements):
        if domain.is_sphere:
            res = min(chart.resolution + level, MAX_SPHERE_LEVEL)
            level_domain, level_chart = make_domain(domain.kind, 2, None, res)
        else:
            res = config.resolution * 2**level
            level_domain, level_chart = build_domain(config, res)
        nodal = extract_nodal_set(f, level_domain, level_chart)
        volume = nodal_volume(nodal)
        gap = None if previous is None else abs(volume - previous)
        ratio = None if not (gap and previous_gap) else previous_gap / gap
        rows.append(
            [res, level_chart.cell_size, volume, component_count(nodal), gap, ratio]
        )
        previous, previous_gap = volume, gap
        logger.info(f"Resolution {res}: V = {volume:.10g}")

    return RunResult(
        payload={
            "volume": rows[-1][2],
            "components": rows[-1][3],
            "convergence": [
                dict(zip(("resolution", "spacing", "volume", "components", "difference", "ratio"), r))
                for r in rows
            ],
        },
        header=["resolution", "spacing", "volume", "components", "difference", "ratio"],
        rows=rows,
        normalization=model.normalization if model else None,
    )


def run_variation(config: RunConfig) -> RunResult:
    domain, chart = build_domain(config)
    f, model = _subject(config, domain)
    if config.direction is not None:
        h = config.direction.build()
    elif model is not None:
        h = sample_field(model, int(member_seeds(config.seed, 2)[1]))
    else:
        raise ConfigError("variation needs a direction or a model", "cli", "dispatch")

    report = first_variation(f, h, domain, chart)
    if config.fd:
        report = report.with_oracle(fd_first_variation(f, h, config.fd_epsilon, domain, chart))
    payload = report.model_dump(mode="json")
    if model is not None:
        payload["cm_norm_sq"] = cm_norm_sq(f, model, domain, chart, n_jobs=config.n_jobs)

    header = list(payload)
    return RunResult(
        payload=payload,
        header=header,
        rows=[[payload[k] for k in header]],
        normalization=model.normalization if model else None,
        omissions=_omissions(domain),
    )


def run_kacrice(config: RunConfig) -> RunResult:
    domain, _ = build_domain(config)
    model = _model(config, domain)
    ev = expected_volume(
        model,
        resolution=config.quadrature_resolution,
        seed=config.seed,
        mc_samples=config.mc_samples,
    )
    payload: dict[str, Any] = {"expected_volume": ev}
    rows = [["expected_volume", ev, None, None]]
    if domain.has_boundary:
        eb = expected_boundary_volume(
            model, resolution=config.quadrature_resolution, seed=config.seed, mc_samples=config.mc_samples
        )
        payload["expected_boundary_volume"] = eb
        rows.append(["expected_boundary_volume", eb, None, None])

    report = second_moment(
        model,
        resolution=config.quadrature_resolution,
        delta=config.delta,
        seed=config.seed,
        mc_samples=config.mc_samples,
        n_jobs=config.n_jobs,
    )
    payload["second_moment"] = report.model_dump(mode="json")
    rows.extend(["second_moment", v, d, report.drift] for d, v in zip(report.deltas, report.values))

    if config.derivative:
        dn = derivative_norm_sq_expectation(
            model,
            resolution=config.quadrature_resolution,
            delta=config.delta,
            seed=config.seed,
            mc_samples=config.mc_samples,
            n_jobs=config.n_jobs,
        )
        payload["derivative_norm_sq"] = dn.model_dump(mode="json")
        rows.extend(["derivative_norm_sq", v, d, None] for d, v in zip(dn.deltas, dn.values))

    return RunResult(
        payload=payload,
        header=["quantity", "value", "delta", "drift"],
        rows=rows,
        normalization=model.normalization,
        omissions=_omissions(domain),
    )


def run_morse_profile(config: RunConfig) -> RunResult:
    domain, chart = build_domain(config)
    T, model = _subject(config, domain)
    t_range = config.t_range
    if t_range is None:
        values = T.evaluate(chart.nodes())
        pad = 0.05 * float(np.ptp(values))
        t_range = (float(values.min()) - pad, float(values.max()) + pad)

    profile = level_profile(
        T, domain, chart, t_range, config.t_resolution, config.ladder_depth, config.n_jobs
    )
    continuity = {}
    for c in profile.critical_values:
        try:
            continuity[repr(c)] = profile_continuity(profile, c)
        except InsufficientSamples as err:
            logger.warning(f"No continuity check at t = {c:.6g}: {err.message}")

    return RunResult(
        payload={
            "t_range": list(t_range),
            "critical_values": profile.critical_values,
            "critical_zeros": [z.to_record().model_dump(mode="json") for z in profile.critical_zeros],
            "fits": [fit.model_dump(mode="json") for fit in profile.fits],
            "continuity": continuity,
        },
        header=["t", "phi", "dphi", "flag"],
        rows=[list(r) for r in profile.rows()],
        normalization=model.normalization if model else None,
        omissions=_omissions(domain),
    )


def run_segment_scan(config: RunConfig) -> RunResult:
    domain, chart = build_domain(config)
    model = _model(config, domain)
    report = segment_scan(
        model, chart, config.segments, config.seed, config.t_range or (0.0, 1.0), config.n_jobs
    )
    return RunResult(
        payload=report.model_dump(mode="json"),
        header=["segment", "roots"],
        rows=[[i, c] for i, c in enumerate(report.root_counts)],
        normalization=model.normalization,
    )


def run_ensemble_command(config: RunConfig) -> RunResult:
    domain, chart = build_domain(config)
    model = _model(config, domain)
    summary = run_ensemble(model, chart, config.samples, config.seed, config.n_jobs)
    return RunResult(
        payload=summary.model_dump(mode="json"),
        header=["seed", "volume", "components"],
        rows=[list(r) for r in zip(summary.seeds, summary.values, summary.component_counts)],
        normalization=model.normalization,
        omissions=[f"{len(summary.excluded_seeds)} members excluded by the regularity floor"],
    )


def run_density(config: RunConfig) -> RunResult:
    domain, chart = build_domain(config)
    model = _model(config, domain)
    summary = run_ensemble(model, chart, config.samples, config.seed, config.n_jobs)
    law = estimate_law(summary)
    columns = ["x", "density", "centred_x", "centred_density", "g", "reconstruction"]
    rows = [
        list(r)
        for r in zip(
            law.grid, law.density, law.centred_grid, law.centred_density, law.g, law.reconstruction
        )
    ]
    return RunResult(
        payload={"ensemble": summary.model_dump(mode="json"), "law": law.model_dump(mode="json")},
        header=columns,
        rows=rows,
        normalization=model.normalization,
    )


RUNNERS: dict[Command, Callable[[RunConfig], RunResult]] = {
    Command.VOLUME: run_volume,
    Command.VARIATION: run_variation,
    Command.KACRICE: run_kacrice,
    Command.MORSE_PROFILE: run_morse_profile,
    Command.SEGMENT_SCAN: run_segment_scan,
    Command.ENSEMBLE: run_ensemble_command,
    Command.DENSITY: run_density,
}


def metadata_for(config: RunConfig, result: RunResult) -> RunMetadata:
    return RunMetadata(
        version=__version__,
        command=config.command.value,
        seed=config.seed,
        config=config.model_dump(mode="json"),
        normalization=result.normalization,
        omissions=result.omissions,
    )


def _json_text(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_outputs(config: RunConfig, result: RunResult) -> Path:
    """
    Writes <output_dir>/<command>.json or .csv. Every file carries the
    metadata record, and nothing time-dependent is written, so a rerun
    with the same config reproduces the file byte for byte.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metadata = metadata_for(config, result).model_dump(mode="json")
    name = config.command.value

    if config.format == OutputFormat.JSON:
        path = out / f"{name}.json"
        path.write_text(_json_text({"metadata": metadata, "result": result.payload}))
    else:
        path = out / f"{name}.csv"
        buffer = io.StringIO()
        buffer.write("# metadata: " + json.dumps(metadata, sort_keys=True) + "\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(result.header)
        writer.writerows(["" if v is None else v for v in row] for row in result.rows)
        path.write_text(buffer.getvalue())
    logger.info(f"Wrote {path}")
    return path


def write_error(
    config: Optional[RunConfig], err: NodalLabError, output_dir: Optional[str] = None
) -> Path:
    if output_dir is None:
        output_dir = config.output_dir if config is not None else get_settings().output_dir
    directory = output_dir
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "error.json"
    path.write_text(_json_text(err.to_record()))
    return path


def dispatch(config: RunConfig) -> Path:
    if config.command is None:
        raise ConfigError("no command given", "cli", "dispatch")
    logger.info(f"Running {config.command.value}", extra={"seed": config.seed})
    result = RUNNERS[config.command](config)
    return write_outputs(config, result)
