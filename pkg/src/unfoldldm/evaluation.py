"""Per-image and per-stage PSNR/SSIM over a paired set."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from unfoldldm.metrics import psnr, ssim
from unfoldldm.training import infer


@dataclass
class MetricReport:
    dataset: str
    names: list[str]
    psnr_in: list[float]
    ssim_in: list[float]
    psnr_out: list[float]
    ssim_out: list[float]
    stage_psnr: list[list[float]] = field(default_factory=list)  # [stage][image]
    stage_ssim: list[list[float]] = field(default_factory=list)

    @property
    def mean_psnr_in(self) -> float:
        return float(np.mean(self.psnr_in))

    @property
    def mean_psnr_out(self) -> float:
        return float(np.mean(self.psnr_out))

    @property
    def mean_ssim_out(self) -> float:
        return float(np.mean(self.ssim_out))

    def stage_means(self) -> list[dict]:
        return [{"stage": k, "psnr": float(np.mean(p)), "ssim": float(np.mean(s))}
                for k, (p, s) in enumerate(zip(self.stage_psnr, self.stage_ssim), 1)]

    def rows(self) -> list[dict]:
        out = []
        for i, name in enumerate(self.names):
            row = {"image": name, "psnr_in": self.psnr_in[i], "ssim_in": self.ssim_in[i],
                   "psnr_out": self.psnr_out[i], "ssim_out": self.ssim_out[i]}
            for k, (p, s) in enumerate(zip(self.stage_psnr, self.stage_ssim), 1):
                row[f"psnr_stage{k}"] = p[i]
                row[f"ssim_stage{k}"] = s[i]
            out.append(row)
        return out

    def summary(self) -> dict:
        return {
            "dataset": self.dataset,
            "count": len(self.names),
            "mean_psnr_in": self.mean_psnr_in,
            "mean_ssim_in": float(np.mean(self.ssim_in)),
            "mean_psnr_out": self.mean_psnr_out,
            "mean_ssim_out": self.mean_ssim_out,
            "psnr_gain": self.mean_psnr_out - self.mean_psnr_in,
            "stages": self.stage_means(),
        }


def evaluate(model, pairs, seed: int = 0, batch: int = 25, dataset: str = "synthetic") -> MetricReport:
    """Restore every degraded image of ``pairs`` and score it against its clean twin."""
    n = len(pairs)
    outs, stages = [], []
    for start in range(0, n, batch):
        x, trace = infer(model, pairs.degraded[start:start + batch], seed=seed + start)
        outs.append(x)
        stages.append([s["x_k"] for s in trace["stages"]])
    x_out = np.concatenate(outs)
    stage_out = [np.concatenate([b[k] for b in stages]) for k in range(len(stages[0]))]
    clean, deg = pairs.clean, pairs.degraded
    return MetricReport(
        dataset=dataset,
        names=[f"{i:05d}" for i in range(n)],
        psnr_in=[psnr(deg[i], clean[i]) for i in range(n)],
        ssim_in=[ssim(deg[i], clean[i]) for i in range(n)],
        psnr_out=[psnr(x_out[i], clean[i]) for i in range(n)],
        ssim_out=[ssim(x_out[i], clean[i]) for i in range(n)],
        stage_psnr=[[psnr(s[i], clean[i]) for i in range(n)] for s in stage_out],
        stage_ssim=[[ssim(s[i], clean[i]) for i in range(n)] for s in stage_out],
    )
