"""Inference over a dataset split and the IOD/DOD comparison runs."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import network
from .evaluation import (Detection, UndefinedMetricError, average_precision, late_fusion,
                         mean_detection_ap, metrics_record)
from .network import NetworkParams, event_head, forward_backbone, forward_detection, injection_maps
from .synth_data import NONRIGID_NAMES, RIGID_NAMES, ProposalConfig, propose_rois
from .trainer import TrainConfig, TrainSet, run_stage

log = logging.getLogger(__name__)

DETECTION_IOU = {"rigid": 0.5, "nonrigid": 0.1}
FUSION_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)


@dataclass
class Predictions:
    event_scores: np.ndarray                    # P(malicious) per image
    detections: dict[str, list[Detection]] = field(default_factory=dict)
    image_scores: dict[str, np.ndarray] = field(default_factory=dict)  # max foreground prob per image


def predict(params: NetworkParams, items, tasks=("event", "rigid", "nonrigid")) -> Predictions:
    """Run the full test-time pipeline image by image.

    Detection branches run whenever a detection task is requested or the event
    branch needs injected maps.
    """
    cfg = params.config
    dtype = next(iter(params.groups["shared"].params.values())).data.dtype
    rigid_rois = propose_rois(np.zeros((3, *cfg.input_size)), "rigid", ProposalConfig())
    nonrigid_rois = propose_rois(np.zeros((3, *cfg.input_size)), "nonrigid")
    need_det = cfg.injection_site != "none" or "rigid" in tasks or "nonrigid" in tasks
    events = np.zeros(len(items))
    dets: dict[str, list[Detection]] = {"rigid": [], "nonrigid": []}
    img_scores = {"rigid": np.zeros(len(items)), "nonrigid": np.zeros(len(items))}
    box = network.whole_image_box(cfg)
    for n, (img, _) in enumerate(items):
        shared = forward_backbone(np.asarray(img, dtype=dtype), params)
        outs = {}
        if need_det:
            for branch, rois in (("rigid", rigid_rois), ("nonrigid", nonrigid_rois)):
                out = forward_detection(shared, rois, branch, params)
                outs[branch] = out
                probs = out.probs
                img_scores[branch][n] = probs[:, 1:].max()
                if branch in tasks:
                    for r, b in enumerate(rois):
                        for c in range(probs.shape[1] - 1):
                            dets[branch].append(Detection(n, b, c, float(probs[r, c + 1])))
        if "event" in tasks:
            inj = None
            if cfg.injection_site != "none":
                inj = [injection_maps(outs["rigid"], rigid_rois, outs["nonrigid"], nonrigid_rois, cfg)]
            pooled = network.pool_rois(shared, [box], params)
            events[n] = event_head(pooled, params, inj).probs[0, 1]
    return Predictions(events, {k: v for k, v in dets.items() if k in tasks},
                       img_scores if need_det else {})


def evaluate(params: NetworkParams, items, tasks=("event", "rigid", "nonrigid"), split: str = "test",
             fusion: bool = False) -> list[dict]:
    """Metrics records (one per task, plus a fused event record when ``fusion``)."""
    if fusion:
        tasks = tuple(dict.fromkeys((*tasks, "rigid", "nonrigid")))
    pred = predict(params, items, tasks)
    h = params.config.hash()
    records = []
    labels = np.array([ann.event_label for _, ann in items], dtype=bool)
    if "event" in tasks:
        records.append(metrics_record("event", split, average_precision(pred.event_scores, labels),
                                      int(labels.sum()), len(items), h,
                                      injection_site=params.config.injection_site))
    for task, names in (("rigid", RIGID_NAMES), ("nonrigid", NONRIGID_NAMES)):
        if task not in tasks:
            continue
        gt = {n: (ann.rigid_objects if task == "rigid" else ann.nonrigid_objects)
              for n, (_, ann) in enumerate(items)}
        num_pos = sum(len(v) for v in gt.values())
        try:
            ap = mean_detection_ap(pred.detections[task], gt, range(len(names)), DETECTION_IOU[task])
        except UndefinedMetricError:
            ap = float("nan")
        records.append(metrics_record(task, split, ap, num_pos, len(items), h, iou_thresh=DETECTION_IOU[task]))
    if fusion and "event" in tasks:
        fused = late_fusion([pred.event_scores, pred.image_scores["rigid"], pred.image_scores["nonrigid"]],
                            FUSION_WEIGHTS)
        records.append(metrics_record("event_fused", split, average_precision(fused, labels),
                                      int(labels.sum()), len(items), h, weights=list(FUSION_WEIGHTS)))
    return records


@dataclass
class TrendRun:
    seed: int
    stage2: NetworkParams
    stage3: dict[str, NetworkParams]
    event_ap: dict[str, float]        # "iod" (stage-2 head) and one entry per stage-3 site
    seconds: float
    losses: dict[str, np.ndarray]


def run_trend(train_items, test_items, config: TrainConfig, sites=("none", "c7"),
              progress=None) -> TrendRun:
    """Stages 1-2 once, then stage 3 per injection site from the shared stage-2 output.

    Event AP is measured on ``test_items`` for the stage-2 network (the
    injection-free IOD baseline) and for every stage-3 variant.
    """
    t0 = time.perf_counter()
    data = TrainSet(train_items, config)
    params = network.build(replace(config.arch, injection_site="none"), config.seed, config.dtype)
    losses = {}
    for stage_id in (1, 2):
        res = run_stage(config.stage(stage_id), params, data, config)
        params, losses[f"stage{stage_id}"] = res.params, res.losses
        log.info("seed %d stage %d done (%.0fs, loss %.3f -> %.3f)", config.seed, stage_id,
                 time.perf_counter() - t0, res.losses[:50].mean(), res.losses[-50:].mean())
    stage2 = params
    aps = {"iod": evaluate(stage2, test_items, ("event",))[0]["ap"]}
    stage3 = {}
    for site in sites:
        res = run_stage(config.stage(3), stage2, data, config, site=site)
        stage3[site] = res.params
        losses[f"stage3_{site}"] = res.losses
        aps[site] = evaluate(res.params, test_items, ("event",))[0]["ap"]
        log.info("seed %d stage 3 site %s: event AP %.4f (%.0fs)", config.seed, site, aps[site],
                 time.perf_counter() - t0)
    return TrendRun(config.seed, stage2, stage3, aps, time.perf_counter() - t0, losses)
