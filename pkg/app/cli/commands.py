"""`lite-pose` commands: load files, delegate to services, write structured reports.

Every command writes `<out>/report.json` plus its own JSON/TNSR outputs, and
nothing at all when an input cannot be read.
"""
import functools
import hashlib
import logging
import sys
from collections import defaultdict
from pathlib import Path

import click
import numpy as np
from pydantic import BaseModel, ValidationError
from tqdm import tqdm

from app.core.config import settings
from app.core.errors import EXIT_DOMAIN, AnnotationError, ConfigError, DataFileError, PoseKitError
from app.core.run_log import RunLog, default_assumptions
from app.models.schemas import BenchReport, BoxList, BoxRecord, DiagnosticList, LayerTiming
from app.services.distill_loss import LossConfig, combined_loss_grad, loss_report
from app.services.evaluator import DetInstance, KeypointEvaluator, OksConstants, evaluator, write_detections
from app.services.evaluator import load_annotations, load_detections
from app.services.executor import executor
from app.services.flops import count_macs, graph_costs, summarize_graph
from app.services.graph import Graph, build_model
from app.services.heatmap_codec import DECODE_METHODS, GaussianSpec, PersonBox
from app.services.heatmap_codec import box_to_input_transform, decode_batch, heatmap_to_image_coords
from app.services.quantizer import compare_outputs, fp16_infer, load_sidecar, model_from_sidecar
from app.services.quantizer import quantize_model, quantized_infer, save_sidecar
from app.services.tensor_io import read_tensor, write_tensor
from app.services.validator import config_text, load_config, validate_config
from app.services.weights import WeightStore, blob_path_for, init_weights, read_weights, write_weights

logger = logging.getLogger(__name__)

OUT_OPTION = click.option(
    "--out", type=click.Path(file_okay=False, path_type=Path), default=Path("out"), show_default=True,
    help="Directory for outputs and report.json.",
)


def handle_errors(fn):
    """Translate domain errors into the stable exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PoseKitError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)
    return wrapper


def _start(overridden: set[str] = frozenset()) -> RunLog:
    ctx = click.get_current_context()
    command = [ctx.info_name] + [
        f"--{name.replace('_', '-')}={value}" for name, value in sorted(ctx.params.items()) if name != "out"
    ]
    run = RunLog(command)
    for name, value in default_assumptions().items():
        if name not in overridden:
            run.assume(name, value)
    return run


def _write_model(run: RunLog, path: Path, model: BaseModel):
    path.write_text(model.model_dump_json(indent=2))
    run.record_output(path)


def _finish(run: RunLog, out: Path):
    path = run.write(out)
    click.echo(f"report: {path}")


def _load_model(config: Path, weights: Path, run: RunLog) -> tuple[Graph, WeightStore]:
    cfg = load_config(config)
    run.hash_config(config_text(cfg))
    graph = build_model(cfg)
    ws = read_weights(weights, blob_path_for(weights))
    return graph, ws


def _read_batches(paths: tuple[Path, ...], what: str) -> list[np.ndarray]:
    if not paths:
        raise ConfigError(f"no {what} tensors given")
    return [read_tensor(p) for p in paths]


def _read_boxes(path: Path) -> list[BoxRecord]:
    try:
        return BoxList.validate_json(Path(path).read_text())
    except OSError as e:
        raise DataFileError(f"cannot read boxes {path}: {e}") from e
    except ValidationError as e:
        raise AnnotationError(f"{path}: malformed box record: {e.errors()[0]['msg']}") from e


def _checksum(t: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(t, dtype="<f4").tobytes()).hexdigest()


@click.group()
def cli():
    """Inference, analysis and evaluation for lightweight top-down pose networks."""


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--convention", type=click.Choice(["input", "output"]), default="output", show_default=True)
@click.option("--double-count", is_flag=True, help="Report GFLOPs as 2 x MACs.")
@OUT_OPTION
@handle_errors
def flops(config, convention, double_count, out):
    """Per-layer MAC and parameter counts for a model config."""
    run = _start()
    with run.stage("load_config"):
        cfg = load_config(config)
    run.hash_config(config_text(cfg))
    with run.stage("count", convention=convention):
        report = count_macs(cfg, convention)

    click.echo(summarize_graph(report))
    click.echo(f"GFLOPs ({'2x' if double_count else '1x'} MACs): {report.gflops(double_count):.3f}")
    out.mkdir(parents=True, exist_ok=True)
    _write_model(run, out / "flops.json", report)
    _finish(run, out)


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--strict-3x3", is_flag=True, help="Warn on any kernel other than 1x1 or 3x3.")
@OUT_OPTION
@handle_errors
def validate(config, strict_3x3, out):
    """Check a config against the embeddable layer vocabulary; exit 1 on errors."""
    run = _start()
    with run.stage("load_config"):
        cfg = load_config(config)
    run.hash_config(config_text(cfg))
    with run.stage("validate", strict_3x3=strict_3x3):
        diags = validate_config(cfg, strict_3x3)

    for d in diags:
        click.echo(f"{d.level}: [{d.rule}] {d.message}")
        if d.level == "warning":
            run.warn(f"{d.rule}: {d.message}")
    errors = sum(d.level == "error" for d in diags)
    click.echo(f"{errors} error(s), {len(diags) - errors} warning(s)")

    out.mkdir(parents=True, exist_ok=True)
    path = out / "diagnostics.json"
    path.write_bytes(DiagnosticList.dump_json(diags, indent=2))
    run.record_output(path)
    _finish(run, out)
    if errors:
        sys.exit(EXIT_DOMAIN)


@cli.command("init-weights")
@click.argument("config", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scheme", type=click.Choice(["he", "zeros"]), default="he", show_default=True)
@OUT_OPTION
@handle_errors
def init_weights_cmd(config, seed, scheme, out):
    """Write deterministic weights (weights.json + weights.bin) for a config."""
    run = _start()
    with run.stage("load_config"):
        cfg = load_config(config)
        graph = build_model(cfg)
    run.hash_config(config_text(cfg))
    with run.stage("init", seed=seed, scheme=scheme):
        ws = init_weights(graph, seed, scheme)

    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "weights.json"
    write_weights(ws, manifest_path, blob_path_for(manifest_path))
    run.record_output(manifest_path)
    run.record_output(blob_path_for(manifest_path))
    click.echo(f"{graph.name}: {ws.total_elements():,} parameters -> {manifest_path}")
    _finish(run, out)


@cli.command()
@click.option("--config", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--weights", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Weight manifest.")
@click.option("--input", "inputs", multiple=True, type=click.Path(dir_okay=False, path_type=Path),
              help="TNSR crop batch; repeatable.")
@click.option("--fuse", is_flag=True, help="Fold batchnorm into the preceding (de)conv.")
@click.option("--precision", type=click.Choice(["fp32", "fp16", "int8"]), default="fp32", show_default=True)
@click.option("--calib", multiple=True, type=click.Path(dir_okay=False, path_type=Path),
              help="TNSR calibration batch for int8; repeatable.")
@click.option("--sidecar", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Stored int8 scales instead of --calib.")
@click.option("--threads", type=int, default=settings.DEFAULT_THREADS, show_default=True)
@OUT_OPTION
@handle_errors
def infer(config, weights, inputs, fuse, precision, calib, sidecar, threads, out):
    """Run the network on crop tensors and dump heatmaps.tnsr."""
    run = _start()
    if precision == "int8" and not calib and sidecar is None:
        raise ConfigError("int8 inference needs --calib tensors (or a --sidecar from `quantize`)")
    with run.stage("load"):
        graph, ws = _load_model(config, weights, run)
        batches = _read_batches(inputs, "input")
        calib_batches = [read_tensor(p) for p in calib]
        stored = load_sidecar(sidecar) if sidecar is not None else None

    if precision == "int8":
        with run.stage("quantize", calib=len(calib_batches)):
            qm = model_from_sidecar(graph, ws, stored) if stored else quantize_model(graph, ws, calib_batches)
        forward = functools.partial(quantized_infer, qm)
    elif precision == "fp16":
        if fuse:
            run.warn("--fuse has no effect on the fp16 path")
        forward = functools.partial(fp16_infer, graph, ws)
    else:
        forward = functools.partial(executor.infer, graph, ws, fuse=fuse, threads=threads)

    with run.stage("infer", precision=precision, fuse=fuse, threads=threads):
        heatmaps = np.concatenate([forward(x) for x in tqdm(batches, desc="infer", unit="batch")], axis=0)

    out.mkdir(parents=True, exist_ok=True)
    path = write_tensor(out / "heatmaps.tnsr", heatmaps)
    run.record_output(path)
    click.echo(f"heatmaps {tuple(heatmaps.shape)} sha256={_checksum(heatmaps)[:16]} -> {path}")
    _finish(run, out)


@cli.command()
@click.option("--heatmaps", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--boxes", required=True, type=click.Path(dir_okay=False, path_type=Path),
              help="JSON list of person boxes, one per heatmap stack.")
@click.option("--method", type=click.Choice(DECODE_METHODS), default="dark", show_default=True)
@click.option("--sigma", type=float, default=None, help=f"Modulation sigma [default: {settings.HEATMAP_SIGMA}].")
@click.option("--margin", type=float, default=None, help=f"Box margin [default: {settings.BOX_MARGIN}].")
@click.option("--stride", type=int, default=settings.HEATMAP_STRIDE, show_default=True)
@OUT_OPTION
@handle_errors
def decode(heatmaps, boxes, method, sigma, margin, stride, out):
    """Decode heatmaps to image-space keypoints (detections.json)."""
    overridden = {name for name, value in (("sigma", sigma), ("margin", margin)) if value is not None}
    run = _start(overridden)
    with run.stage("load"):
        maps = read_tensor(heatmaps)
        records = _read_boxes(boxes)
    if len(records) != maps.shape[0]:
        raise ConfigError(f"{len(records)} boxes for {maps.shape[0]} heatmap stacks")

    g = GaussianSpec(sigma if sigma is not None else settings.HEATMAP_SIGMA)
    margin = margin if margin is not None else settings.BOX_MARGIN
    input_size = (maps.shape[2] * stride, maps.shape[3] * stride)
    with run.stage("decode", method=method, persons=len(records)):
        people = decode_batch(maps, method, g)
        dets = []
        for rec, kps in zip(records, people):
            t = box_to_input_transform(PersonBox(rec.cx, rec.cy, rec.width, rec.height), input_size, margin)
            mapped = heatmap_to_image_coords(kps, t, stride)
            triplets = np.array([[kp.x, kp.y, kp.score] for kp in mapped])
            score = rec.score * float(np.mean(triplets[:, 2]))
            dets.append(DetInstance(rec.image_id, triplets, score, tuple(bool(kp.fallback) for kp in mapped)))

    fallbacks = sum(kp.fallback for person in people for kp in person)
    if fallbacks:
        run.warn(f"{fallbacks} keypoint(s) fell back to quarter-offset decoding")
    out.mkdir(parents=True, exist_ok=True)
    path = write_detections(dets, out / "detections.json")
    run.record_output(path)
    click.echo(f"{len(dets)} detections ({method}) -> {path}")
    _finish(run, out)


@cli.command("eval")
@click.option("--detections", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--annotations", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--oks-consts", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="JSON file with per-keypoint OKS constants.")
@OUT_OPTION
@handle_errors
def eval_cmd(detections, annotations, oks_consts, out):
    """OKS-based AP, AP50, AP medium and AR."""
    run = _start({"oks_constants"} if oks_consts is not None else set())
    with run.stage("load"):
        ev = KeypointEvaluator(OksConstants.load(oks_consts)) if oks_consts is not None else evaluator
        dets = load_detections(detections)
        gts, image_ids = load_annotations(annotations)
    with run.stage("evaluate", detections=len(dets), annotations=len(gts), images=len(image_ids)):
        result = ev.evaluate(dets, gts, image_ids)

    click.echo(f"AP={result.ap:.4f} AP50={result.ap50:.4f} APm={result.ap_medium:.4f} AR={result.ar:.4f}")
    for row in result.per_threshold:
        click.echo(f"  OKS {row.threshold:.2f}: AP={row.ap:.4f} AR={row.ar:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    _write_model(run, out / "eval.json", result)
    _finish(run, out)


@cli.command()
@click.option("--config", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--weights", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--input", "input_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="TNSR batch; a seeded random batch when omitted.")
@click.option("--batch", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--iters", type=int, default=10, show_default=True)
@click.option("--threads", type=int, default=settings.DEFAULT_THREADS, show_default=True)
@click.option("--fuse", is_flag=True)
@OUT_OPTION
@handle_errors
def bench(config, weights, input_path, batch, seed, iters, threads, fuse, out):
    """Per-layer wall-clock timings (bench.json). Timings are report-only."""
    run = _start()
    if iters < 1 or batch < 1:
        raise ConfigError(f"iters and batch must be >= 1, got {iters} and {batch}")
    with run.stage("load"):
        graph, ws = _load_model(config, weights, run)
        if input_path is not None:
            x = read_tensor(input_path)
        else:
            x = np.random.default_rng(seed).standard_normal((batch, *graph.input_node.shape)).astype(np.float32)

    totals: dict[str, float] = defaultdict(float)
    output = None
    with run.stage("bench", iters=iters, threads=threads, fuse=fuse):
        for _ in tqdm(range(iters), desc="bench", unit="iter"):
            output, timings = executor.timed_infer(graph, ws, x, threads=threads, fuse=fuse)
            for node_id, ms in timings.items():
                totals[node_id] += ms

    layers = [
        LayerTiming(layer_id=n.id, kind=n.kind, mean_ms=totals[n.id] / iters, total_ms=totals[n.id])
        for n in graph.nodes
    ]
    report = BenchReport(
        model_name=graph.name,
        iters=iters,
        threads=threads,
        layers=layers,
        total_ms=sum(layer.mean_ms for layer in layers),
        output_checksum=_checksum(output),
    )
    click.echo(summarize_graph(graph_costs(graph), {layer.layer_id: layer.mean_ms for layer in layers}))
    click.echo(f"mean forward {report.total_ms:.2f} ms over {iters} iteration(s)")
    out.mkdir(parents=True, exist_ok=True)
    _write_model(run, out / "bench.json", report)
    _finish(run, out)


@cli.command()
@click.option("--pred", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--gt", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--teacher", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--alpha", type=float, default=None, help=f"Distillation weight [default: {settings.DISTILL_ALPHA}].")
@click.option("--grad", is_flag=True, help="Also dump d(loss)/d(pred) to grad.tnsr.")
@OUT_OPTION
@handle_errors
def loss(pred, gt, teacher, alpha, grad, out):
    """Supervised + distillation heatmap MSE."""
    run = _start({"alpha"} if alpha is not None else set())
    with run.stage("load"):
        p, g, t = read_tensor(pred), read_tensor(gt), read_tensor(teacher)
    cfg = LossConfig(alpha if alpha is not None else settings.DISTILL_ALPHA)
    with run.stage("loss", alpha=cfg.alpha):
        report = loss_report(p, g, t, cfg)
        gradient = combined_loss_grad(p, g, t, cfg) if grad else None

    click.echo(f"loss={report.loss:.8g} supervised={report.supervised:.8g} distillation={report.distillation:.8g}")
    out.mkdir(parents=True, exist_ok=True)
    _write_model(run, out / "loss.json", report)
    if gradient is not None:
        run.record_output(write_tensor(out / "grad.tnsr", gradient))
    _finish(run, out)


@cli.command()
@click.option("--config", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--weights", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--calib", multiple=True, type=click.Path(dir_okay=False, path_type=Path),
              help="TNSR calibration batch; repeatable.")
@click.option("--compare", is_flag=True, help="Also report fp16/int8 error against fp32 on the calibration set.")
@OUT_OPTION
@handle_errors
def quantize(config, weights, calib, compare, out):
    """Calibrate int8 scales and write quant.json."""
    run = _start()
    with run.stage("load"):
        graph, ws = _load_model(config, weights, run)
        batches = _read_batches(calib, "calibration")
    with run.stage("calibrate", batches=len(batches)):
        qm = quantize_model(graph, ws, batches)
    error_report = None
    if compare:
        with run.stage("compare"):
            error_report = compare_outputs(graph, ws, qm, np.concatenate(batches, axis=0))
        click.echo(f"fp16 max|err|={error_report.fp16.max_abs:.3e}  int8 max|err|={error_report.int8.max_abs:.3e}")

    out.mkdir(parents=True, exist_ok=True)
    run.record_output(save_sidecar(qm, out / "quant.json"))
    if error_report is not None:
        _write_model(run, out / "quant_error.json", error_report)
    click.echo(f"{len(qm.layers)} layers quantized -> {out / 'quant.json'}")
    _finish(run, out)
