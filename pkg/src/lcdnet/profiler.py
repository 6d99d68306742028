"""Static parameter and multiply-accumulate accounting.

Counting rules: a convolution costs ``weight.size * H_out * W_out`` MACs
(bias adds are free); batch norm, activations, residual adds and fusion
products cost one op per element; the gate costs ``2*C*H*W + 5*C``;
bilinear upsampling costs 4 per output element; channel exchange and
concatenation cost nothing. Encoder rows cover both temporal streams.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import List, Tuple

REFERENCE_PARAMS = 2.56e6
REFERENCE_FLOPS = 4.45e9

CSV_FIELDS = ["layer", "out_n", "out_c", "out_h", "out_w", "params", "macs"]


@dataclass
class Row:
    layer: str
    out_shape: Tuple[int, int, int, int]
    params: int
    macs: int
    buffers: int = 0


@dataclass
class ComplexityReport:
    rows: List[Row] = field(default_factory=list)
    input_hw: Tuple[int, int] = (0, 0)
    notes: List[str] = field(default_factory=list)

    def add(self, name: str, out_shape, params: int, macs: int, buffers: int = 0) -> None:
        self.rows.append(Row(name, tuple(int(v) for v in out_shape), int(params), int(macs), int(buffers)))

    def elementwise(self, name: str, shape, streams: int = 1, ops_per_element: int = 1) -> None:
        n, c, h, w = shape
        self.add(name, (n * streams, c, h, w), 0, ops_per_element * c * h * w * streams)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_buffers(self) -> int:
        return sum(r.buffers for r in self.rows)

    @property
    def flops_mac(self) -> int:
        """FLOPs counting one MAC as one operation."""
        return self.total_macs

    @property
    def flops_2mac(self) -> int:
        return 2 * self.total_macs

    def by_component(self) -> dict:
        """(params, macs) grouped by the first component of the layer name."""
        out: dict = {}
        for r in self.rows:
            key = r.layer.split(".")[0]
            p, m = out.get(key, (0, 0))
            out[key] = (p + r.params, m + r.macs)
        return out

    def closer_convention(self, target: float = REFERENCE_FLOPS) -> Tuple[str, int]:
        a, b = self.flops_mac, self.flops_2mac
        return ("FLOPs=MACs", a) if abs(a - target) <= abs(b - target) else ("FLOPs=2*MACs", b)

    def summary(self) -> dict:
        conv, flops = self.closer_convention()
        return {
            "input": f"{self.input_hw[0]}x{self.input_hw[1]}",
            "params": self.total_params,
            "non_trainable_buffers": self.total_buffers,
            "macs": self.total_macs,
            "gflops_mac": self.flops_mac / 1e9,
            "gflops_2mac": self.flops_2mac / 1e9,
            "closer_convention": conv,
            "params_vs_reference": self.total_params / REFERENCE_PARAMS - 1,
            "flops_vs_reference": flops / REFERENCE_FLOPS - 1,
        }


def count_macs(model, input_hw=(256, 256)) -> ComplexityReport:
    rep = ComplexityReport(input_hw=tuple(input_hw))
    model.profile(rep, tuple(input_hw))
    return rep


def count_params(model, input_hw=(64, 64)) -> ComplexityReport:
    """Per-layer parameter rows; the spatial size only affects the MAC column."""
    return count_macs(model, input_hw)


def enumerate_trainable(model) -> int:
    """Direct count of trainable scalars, independent of the profiling walk."""
    return sum(p.size for p in model.parameters())


def to_csv(report: ComplexityReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in report.rows:
        w.writerow([r.layer, *r.out_shape, r.params, r.macs])
    return buf.getvalue()


def to_text(report: ComplexityReport) -> str:
    name_w = max([len("layer"), len("TOTAL")] + [len(r.layer) for r in report.rows])
    head = f"{'layer':<{name_w}}  {'output':>20}  {'params':>12}  {'macs':>15}"
    lines = [head, "-" * len(head)]
    for r in report.rows:
        shape = "x".join(str(v) for v in r.out_shape)
        lines.append(f"{r.layer:<{name_w}}  {shape:>20}  {r.params:>12d}  {r.macs:>15d}")
    lines.append("-" * len(head))
    lines.append(f"{'TOTAL':<{name_w}}  {'':>20}  {report.total_params:>12d}  {report.total_macs:>15d}")
    return "\n".join(lines) + "\n"


def summary_text(report: ComplexityReport) -> str:
    s = report.summary()
    return (
        f"input {s['input']}\n"
        f"trainable params      {s['params']:,} ({s['params'] / 1e6:.3f} M, "
        f"{100 * s['params_vs_reference']:+.1f}% vs 2.56 M)\n"
        f"batch-norm buffers    {s['non_trainable_buffers']:,} (not counted above)\n"
        f"MACs                  {s['macs']:,}\n"
        f"GFLOPs (FLOPs=MACs)   {s['gflops_mac']:.3f}\n"
        f"GFLOPs (FLOPs=2*MACs) {s['gflops_2mac']:.3f}\n"
        f"closer to 4.45 G: {s['closer_convention']} ({100 * s['flops_vs_reference']:+.1f}%)\n"
    ) + _breakdown(report)


def _breakdown(report: ComplexityReport) -> str:
    total_p, total_m = max(report.total_params, 1), max(report.total_macs, 1)
    lines = ["share by component:"]
    for key, (p, m) in report.by_component().items():
        lines.append(f"  {key:<10} params {p:>10,} ({100 * p / total_p:5.1f}%)  "
                     f"MACs {m:>14,} ({100 * m / total_m:5.1f}%)")
    lines.extend(report.notes)
    return "\n".join(lines) + "\n"


def emit_report(report: ComplexityReport, path, fmt: str = "csv") -> None:
    if fmt == "csv":
        text = to_csv(report)
    elif fmt == "text":
        text = to_text(report) + "\n" + summary_text(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(os.fspath(path), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def read_csv(path) -> List[Row]:
    with open(os.fspath(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [Row(d["layer"], (int(d["out_n"]), int(d["out_c"]), int(d["out_h"]), int(d["out_w"])),
                    int(d["params"]), int(d["macs"])) for d in reader]
