"""OKS-based keypoint AP/AR in the COCO style.

Matching is greedy per image and threshold: detections in score order
claim the unmatched ground truth with the highest OKS, provided OKS >= the
threshold. AP averages 101-point interpolated precision over OKS thresholds
0.50:0.05:0.95; AR averages final recall over the same thresholds. At most
AR_MAX_DETS detections per image are scored.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import AnnotationError, ConfigError, DataFileError
from app.models.schemas import (
    AnnotationFile,
    AnnotationRecord,
    DetectionList,
    DetectionRecord,
    EvalResult,
    ImageRecord,
    OksConstantsFile,
    ThresholdMetrics,
)
from app.services.heatmap_codec import PersonBox

logger = logging.getLogger(__name__)

OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
MEDIUM_AREA = (32 ** 2, 96 ** 2)


@dataclass(frozen=True)
class OksConstants:
    k: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        if k.ndim != 1 or k.size == 0 or np.any(k <= 0):
            raise ConfigError("OKS constants must be a non-empty list of positive values")
        object.__setattr__(self, "k", k)

    @classmethod
    def load(cls, path: Path | str = settings.OKS_CONSTANTS_PATH) -> "OksConstants":
        try:
            data = OksConstantsFile.model_validate_json(Path(path).read_text())
        except OSError as e:
            raise DataFileError(f"cannot read OKS constants {path}: {e}") from e
        except ValidationError as e:
            raise ConfigError(f"{path}: invalid OKS constants: {e}") from e
        return cls(np.array(data.k))


@dataclass(frozen=True)
class GtInstance:
    image_id: int
    keypoints: np.ndarray  # (K, 3): x, y, visibility in {0, 1, 2}
    area: float
    bbox: tuple[float, float, float, float]  # x, y, w, h

    @property
    def box(self) -> PersonBox:
        x, y, w, h = self.bbox
        return PersonBox(x + w / 2, y + h / 2, w, h)

    @property
    def num_visible(self) -> int:
        return int(np.count_nonzero(self.keypoints[:, 2] > 0))


@dataclass(frozen=True)
class DetInstance:
    image_id: int
    keypoints: np.ndarray  # (K, 3): x, y, per-keypoint confidence
    score: float
    fallback: tuple[bool, ...] | None = None

    @property
    def area(self) -> float:
        """Area of the keypoint extent, used to ignore unmatched out-of-range detections."""
        xs, ys = self.keypoints[:, 0], self.keypoints[:, 1]
        return float((xs.max() - xs.min()) * (ys.max() - ys.min()))


def compute_oks(det: DetInstance, gt: GtInstance, consts: OksConstants) -> float | None:
    """None when the ground truth has no visible keypoints."""
    k = consts.k
    if det.keypoints.shape[0] != k.size or gt.keypoints.shape[0] != k.size:
        raise AnnotationError(
            f"keypoint count mismatch: det {det.keypoints.shape[0]}, gt {gt.keypoints.shape[0]}, constants {k.size}"
        )
    visible = gt.keypoints[:, 2] > 0
    if not np.any(visible):
        return None
    d2 = np.sum((det.keypoints[:, :2] - gt.keypoints[:, :2]) ** 2, axis=1)
    e = np.exp(-d2 / (2 * gt.area * k ** 2))
    return float(np.mean(e[visible]))


def _oks_matrix(dets: list[DetInstance], gts: list[GtInstance], consts: OksConstants) -> np.ndarray:
    oks = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            v = compute_oks(d, g, consts)
            oks[i, j] = 0.0 if v is None else v
    return oks


def match_instances(oks: np.ndarray, threshold: float, gt_ignore: np.ndarray | None = None) -> np.ndarray:
    """Greedy one-to-one matching of score-sorted detections (rows) to gts (columns).

    Returns, per detection, the matched gt index or -1. Ignored gts are only
    claimed when no regular gt qualifies.
    """
    n_det, n_gt = oks.shape
    ignore = np.zeros(n_gt, dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    order = np.argsort(ignore, kind="mergesort")
    taken = np.zeros(n_gt, dtype=bool)
    matches = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        best, best_oks = -1, threshold
        for g in order:
            if taken[g]:
                continue
            if best >= 0 and not ignore[best] and ignore[g]:
                break
            if oks[d, g] < threshold or (best >= 0 and oks[d, g] <= best_oks):
                continue
            best, best_oks = int(g), oks[d, g]
        if best >= 0:
            taken[best] = True
            matches[d] = best
    return matches


@dataclass
class _ImageEval:
    scores: np.ndarray
    matched: np.ndarray  # (T, D) bool
    det_ignore: np.ndarray  # (T, D) bool
    num_gt: int  # non-ignored


def _sorted_dets(dets: list[DetInstance]) -> list[DetInstance]:
    order = np.argsort([-d.score for d in dets], kind="mergesort")
    return [dets[i] for i in order[:settings.AR_MAX_DETS]]


def _in_range(area: float, area_range: tuple[float, float] | None) -> bool:
    return area_range is None or area_range[0] < area < area_range[1]


def _evaluate_image(dets, gts, consts, area_range) -> _ImageEval:
    dets = _sorted_dets(dets)
    gt_ignore = np.array([g.num_visible == 0 or not _in_range(g.area, area_range) for g in gts], dtype=bool)
    oks = _oks_matrix(dets, gts, consts)
    det_out_of_range = np.array([not _in_range(d.area, area_range) for d in dets], dtype=bool)
    matched = np.zeros((len(OKS_THRESHOLDS), len(dets)), dtype=bool)
    det_ignore = np.zeros_like(matched)
    for t, thr in enumerate(OKS_THRESHOLDS):
        m = match_instances(oks, thr, gt_ignore)
        hit = m >= 0
        matched[t] = hit
        det_ignore[t] = det_out_of_range
        det_ignore[t, hit] = gt_ignore[m[hit]]
    return _ImageEval(np.array([d.score for d in dets]), matched, det_ignore, int(np.count_nonzero(~gt_ignore)))


def _accumulate(evals: list[_ImageEval]) -> tuple[np.ndarray, np.ndarray]:
    """Per-threshold interpolated AP and final recall."""
    num_gt = sum(e.num_gt for e in evals)
    n_thr = len(OKS_THRESHOLDS)
    if num_gt == 0:
        return np.zeros(n_thr), np.zeros(n_thr)
    scores = np.concatenate([e.scores for e in evals]) if evals else np.zeros(0)
    order = np.argsort(-scores, kind="mergesort")
    matched = np.concatenate([e.matched for e in evals], axis=1)[:, order]
    ignore = np.concatenate([e.det_ignore for e in evals], axis=1)[:, order]
    ap = np.zeros(n_thr)
    ar = np.zeros(n_thr)
    for t in range(n_thr):
        tp = np.cumsum(matched[t] & ~ignore[t]).astype(np.float64)
        fp = np.cumsum(~matched[t] & ~ignore[t]).astype(np.float64)
        if tp.size == 0:
            continue
        recall = tp / num_gt
        denom = tp + fp
        precision = np.divide(tp, denom, out=np.zeros_like(tp), where=denom > 0)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
        q = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
        ap[t] = np.mean(q)
        ar[t] = recall[-1]
    return ap, ar


def _group(dets: list[DetInstance], gts: list[GtInstance],
           image_ids: list[int] | None = None) -> tuple[list[int], dict, dict]:
    """Images evaluated are the listed ones plus any carrying ground truth.

    Detections on a listed image without people are scored as false positives.
    """
    if not gts:
        raise AnnotationError("empty ground truth")
    image_ids = sorted({g.image_id for g in gts} | set(image_ids or ()))
    known = set(image_ids)
    for i, d in enumerate(dets):
        if d.image_id not in known:
            raise AnnotationError(f"detection {i}: image_id {d.image_id} is not a listed image")
    gts_by = {i: [g for g in gts if g.image_id == i] for i in image_ids}
    dets_by = {i: [d for d in dets if d.image_id == i] for i in image_ids}
    return image_ids, dets_by, gts_by


def compute_metrics(dets: list[DetInstance], gts: list[GtInstance], consts: OksConstants,
                    image_ids: list[int] | None = None) -> EvalResult:
    image_ids, dets_by, gts_by = _group(dets, gts, image_ids)
    if not any(g.num_visible for g in gts):
        raise AnnotationError("no ground truth instance has a visible keypoint")
    ap, ar = _accumulate([_evaluate_image(dets_by[i], gts_by[i], consts, None) for i in image_ids])
    ap_m, _ = _accumulate([_evaluate_image(dets_by[i], gts_by[i], consts, MEDIUM_AREA) for i in image_ids])
    result = EvalResult(
        ap=float(np.mean(ap)),
        ap50=float(ap[0]),
        ap_medium=float(np.mean(ap_m)),
        ar=float(np.mean(ar)),
        per_threshold=[ThresholdMetrics(threshold=t, ap=float(a), ar=float(r)) for t, a, r in zip(OKS_THRESHOLDS, ap, ar)],
    )
    logger.info(
        f"Eval images={len(image_ids)} gts={len(gts)} dets={len(dets)} "
        f"AP={result.ap:.4f} AP50={result.ap50:.4f} APm={result.ap_medium:.4f} AR={result.ar:.4f}"
    )
    return result


def reference_metrics(dets: list[DetInstance], gts: list[GtInstance], consts: OksConstants,
                      image_ids: list[int] | None = None) -> EvalResult:
    """Exhaustive oracle: plain loops, precision envelope by brute-force max."""
    image_ids, dets_by, gts_by = _group(dets, gts, image_ids)

    def run(area_range):
        num_gt = 0
        per_thr = [[] for _ in OKS_THRESHOLDS]
        for image_id in image_ids:
            ds = _sorted_dets(dets_by[image_id])
            gs = gts_by[image_id]
            ig = [g.num_visible == 0 or not _in_range(g.area, area_range) for g in gs]
            num_gt += sum(not x for x in ig)
            for t, thr in enumerate(OKS_THRESHOLDS):
                taken = [False] * len(gs)
                for d in ds:
                    best, best_oks = None, None
                    for regular_pass in (True, False):
                        for j, g in enumerate(gs):
                            if taken[j] or ig[j] == regular_pass:
                                continue
                            o = compute_oks(d, g, consts)
                            o = 0.0 if o is None else o
                            if o >= thr and (best_oks is None or o > best_oks):
                                best, best_oks = j, o
                        if best is not None:
                            break
                    if best is None:
                        per_thr[t].append((d.score, False, not _in_range(d.area, area_range)))
                    else:
                        taken[best] = True
                        per_thr[t].append((d.score, True, ig[best]))
        ap, ar = [], []
        for rows in per_thr:
            rows = sorted(rows, key=lambda r: -r[0])
            if num_gt == 0 or not rows:
                ap.append(0.0)
                ar.append(0.0)
                continue
            tp = fp = 0
            points = []
            for _, hit, ignored in rows:
                if not ignored:
                    tp += hit
                    fp += not hit
                points.append((tp / num_gt, tp / (tp + fp) if tp + fp else 0.0))
            q = [max((p for r, p in points if r >= rt), default=0.0) for rt in RECALL_THRESHOLDS]
            ap.append(float(np.mean(q)))
            ar.append(points[-1][0])
        return ap, ar

    ap, ar = run(None)
    ap_m, _ = run(MEDIUM_AREA)
    return EvalResult(
        ap=float(np.mean(ap)),
        ap50=ap[0],
        ap_medium=float(np.mean(ap_m)),
        ar=float(np.mean(ar)),
        per_threshold=[ThresholdMetrics(threshold=t, ap=a, ar=r) for t, a, r in zip(OKS_THRESHOLDS, ap, ar)],
    )


def _record_index(e: ValidationError, offset: int = 0) -> str:
    loc = e.errors()[0]["loc"]
    idx = next((p for p in loc[offset:] if isinstance(p, int)), None)
    return f"record {idx}" if idx is not None else "file"


def _triplets(values: list[float], what: str, i: int) -> np.ndarray:
    if len(values) == 0 or len(values) % 3:
        raise AnnotationError(f"{what} {i}: keypoints must be a non-empty flat list of triplets, got {len(values)} values")
    arr = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(arr)):
        raise AnnotationError(f"{what} {i}: keypoints contain NaN or Inf")
    return arr


def gt_from_record(rec: AnnotationRecord, i: int) -> GtInstance:
    kps = _triplets(rec.keypoints, "annotation", i)
    if not np.all(np.isin(kps[:, 2], (0, 1, 2))):
        raise AnnotationError(f"annotation {i}: visibility flags must be 0, 1 or 2")
    if not rec.area > 0:
        raise AnnotationError(f"annotation {i}: area must be > 0, got {rec.area}")
    if len(rec.bbox) != 4:
        raise AnnotationError(f"annotation {i}: bbox must be [x, y, w, h], got {len(rec.bbox)} values")
    return GtInstance(rec.image_id, kps, float(rec.area), tuple(float(v) for v in rec.bbox))


def det_from_record(rec: DetectionRecord, i: int) -> DetInstance:
    if not math.isfinite(rec.score):
        raise AnnotationError(f"detection {i}: score must be finite")
    kps = _triplets(rec.keypoints, "detection", i)
    if rec.fallback is not None and len(rec.fallback) != kps.shape[0]:
        raise AnnotationError(f"detection {i}: {len(rec.fallback)} fallback flags for {kps.shape[0]} keypoints")
    fallback = tuple(rec.fallback) if rec.fallback is not None else None
    return DetInstance(rec.image_id, kps, float(rec.score), fallback)


def load_annotations(path: Path | str) -> tuple[list[GtInstance], list[int]]:
    """Ground-truth instances and the ids of every listed image."""
    try:
        data = AnnotationFile.model_validate_json(Path(path).read_text())
    except OSError as e:
        raise DataFileError(f"cannot read annotations {path}: {e}") from e
    except ValidationError as e:
        raise AnnotationError(f"{path}: malformed annotation {_record_index(e, 1)}: {e.errors()[0]['msg']}") from e
    if not data.annotations:
        raise AnnotationError(f"{path}: empty ground truth")
    gts = [gt_from_record(rec, i) for i, rec in enumerate(data.annotations)]
    return gts, [img.id for img in data.images]


def load_detections(path: Path | str) -> list[DetInstance]:
    try:
        records = DetectionList.validate_json(Path(path).read_text())
    except OSError as e:
        raise DataFileError(f"cannot read detections {path}: {e}") from e
    except ValidationError as e:
        raise AnnotationError(f"{path}: malformed detection {_record_index(e)}: {e.errors()[0]['msg']}") from e
    return [det_from_record(rec, i) for i, rec in enumerate(records)]


def write_detections(dets: list[DetInstance], path: Path | str) -> Path:
    path = Path(path)
    records = [
        DetectionRecord(
            image_id=d.image_id,
            keypoints=d.keypoints.reshape(-1).tolist(),
            score=d.score,
            fallback=[bool(f) for f in d.fallback] if d.fallback is not None else None,
        )
        for d in dets
    ]
    path.write_bytes(DetectionList.dump_json(records, indent=2, exclude_none=True))
    return path


def write_annotations(gts: list[GtInstance], path: Path | str, images: list[ImageRecord] | None = None) -> Path:
    path = Path(path)
    if images is None:
        images = [ImageRecord(id=i, width=0, height=0) for i in sorted({g.image_id for g in gts})]
    data = AnnotationFile(
        images=images,
        annotations=[
            AnnotationRecord(image_id=g.image_id, keypoints=g.keypoints.reshape(-1).tolist(), area=g.area, bbox=list(g.bbox))
            for g in gts
        ],
    )
    path.write_text(data.model_dump_json(indent=2))
    return path


class KeypointEvaluator:
    """Evaluation service bound to one set of OKS constants."""

    def __init__(self, consts: OksConstants | None = None):
        self._consts = consts

    @property
    def consts(self) -> OksConstants:
        if self._consts is None:
            self._consts = OksConstants.load()
        return self._consts

    def evaluate(self, dets: list[DetInstance], gts: list[GtInstance], image_ids: list[int] | None = None) -> EvalResult:
        return compute_metrics(dets, gts, self.consts, image_ids)

    def evaluate_files(self, detections_path: Path | str, annotations_path: Path | str) -> EvalResult:
        gts, image_ids = load_annotations(annotations_path)
        return self.evaluate(load_detections(detections_path), gts, image_ids)


evaluator = KeypointEvaluator()
