"""Closed-form parameter and FLOP counts for a model configuration.

FLOPs follow the multiply-accumulate convention: one MAC is one FLOP and
only the linear maps, the positional bilinear form and the pooling are
counted. Activations, batch norm and softmax are free.
"""

import csv
import io
from dataclasses import dataclass, field

CONVENTION = (
    "FLOPs counted as multiply-accumulates (1 MAC = 1 FLOP) over linear layers, "
    "position mapping and pooling; activations, batch norm and softmax excluded. "
    "Model size counts learnable parameters only (batch-norm running statistics excluded)."
)

PARAM_PARTS = ("relation_mlp", "position_matrices", "classifier", "batchnorm")
FLOP_PARTS = ("relation_mlp", "dpe", "pooling", "classifier")


@dataclass
class ProfileReport:
    params_by_part: dict = field(default_factory=dict)
    flops_by_part: dict = field(default_factory=dict)

    @property
    def params_total(self):
        return sum(self.params_by_part.values())

    @property
    def flops_total(self):
        return sum(self.flops_by_part.values())

    def table(self):
        lines = [f"{'part':<20}{'params':>14}{'flops':>16}"]
        for part in dict.fromkeys(PARAM_PARTS + FLOP_PARTS):
            p = self.params_by_part.get(part, "")
            f = self.flops_by_part.get(part, "")
            lines.append(f"{part:<20}{p!s:>14}{f!s:>16}")
        lines.append(f"{'total':<20}{self.params_total:>14,}{self.flops_total:>16,}")
        lines.append("")
        lines.append(CONVENTION)
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "part", "count"])
        for part, n in self.params_by_part.items():
            w.writerow(["params", part, n])
        w.writerow(["params", "total", self.params_total])
        for part, n in self.flops_by_part.items():
            w.writerow(["flops", part, n])
        w.writerow(["flops", "total", self.flops_total])
        return buf.getvalue()


def _mlp_linear_params(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def _mlp_macs(widths):
    return sum(a * b for a, b in zip(widths[:-1], widths[1:]))


def count_params(config):
    c = config
    parts = dict.fromkeys(PARAM_PARTS, 0)
    cls_widths = [c.classifier_in, *c.classifier_hidden, c.C]
    parts["classifier"] = _mlp_linear_params(cls_widths)
    parts["batchnorm"] = 2 * sum(c.classifier_hidden)
    if c.variant != "flatten_mlp":
        parts["relation_mlp"] = _mlp_linear_params([c.relation_in, *c.relation_hidden, 1])
        parts["batchnorm"] += 2 * sum(c.relation_hidden)
    if c.variant == "full":
        parts["position_matrices"] = 2 * c.M * c.M
    return parts


def count_flops(config):
    c = config
    parts = dict.fromkeys(FLOP_PARTS, 0)
    parts["classifier"] = _mlp_macs([c.classifier_in, *c.classifier_hidden, c.C])
    if c.variant == "flatten_mlp":
        return parts
    k = c.T - 1
    parts["relation_mlp"] = k * _mlp_macs([c.relation_in, *c.relation_hidden, 1])
    parts["pooling"] = k * c.M
    if c.variant == "full":
        # one query matvec and one inner product per historical node, one shared key matvec
        parts["dpe"] = k * (c.M * c.M + c.M) + c.M * c.M
    return parts


def profile(config):
    return ProfileReport(count_params(config), count_flops(config))
