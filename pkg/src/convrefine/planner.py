"""Turns separation tallies into per-block stretch and split factors.

For an analyzed block, let x+ = (n_plus/n_total)*xi and
x- = (n_minus/n_total)*xi, where xi is the mean separation-enhancement
ratio of the subsequent analyzed stages.  Two cases:

  case a (n_plus < n_minus):  separation mostly deteriorated here, so the
      block's inputs are split by 2**floor(x-/lambda) and it is not
      stretched (stretching redundant connections only adds redundancy).
  case b (n_plus >= n_minus): the block helps, so it is stretched by
      1 + lambda*floor(x+/lambda) and its inputs still split by
      2**floor(x-/lambda) to trim the hindering share of connections.

Splits are powers of two so that the group factor keeps dividing typical
channel counts.  lambda scales both floors: larger lambda, gentler factors.
lambda_o is the smallest lambda at which every factor is already identity;
above it nothing can change.

Excluded blocks (input-fed, final stage, trailing inception unit) always
get the identity pair (1, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .netir import NetworkIR
from .sepstats import SeparationTally


class PlanError(ValueError):
    pass


# Snap x/lambda to an integer when within this distance before flooring.
# Tight enough that lambda_o*(1+1e-9) still lands below the floor boundary,
# wide enough to absorb float noise in the tally ratios.
_FLOOR_SNAP = 1e-12


@dataclass(frozen=True)
class PlannerConfig:
    lam: float = 0.25
    tie_tol: float = 1e-6

    def __post_init__(self):
        if not self.lam > 0:
            raise PlanError(f"lambda must be positive, got {self.lam}")
        if self.tie_tol < 0:
            raise PlanError("tie_tol must be non-negative")


@dataclass(frozen=True)
class PlanEntry:
    stretch: float
    split: int
    case: str  # "a", "b" or "x" (excluded)


@dataclass(frozen=True, eq=False)
class RefinementPlan:
    per_block: dict[str, PlanEntry]
    lambda_used: float
    lambda_o: float

    def __post_init__(self):
        for name, entry in self.per_block.items():
            if entry.case not in ("a", "b", "x"):
                raise PlanError(f"block {name}: unknown case {entry.case!r}")
            if entry.split < 1 or entry.split & (entry.split - 1):
                raise PlanError(f"block {name}: split {entry.split} is not a power of two")
            if entry.stretch < 1.0:
                raise PlanError(f"block {name}: stretch {entry.stretch} below 1")
            if entry.case in ("a", "x") and entry.stretch != 1.0:
                raise PlanError(f"block {name}: case {entry.case} forbids stretching")
            if entry.case == "x" and entry.split != 1:
                raise PlanError(f"block {name}: excluded blocks cannot split")
            steps = (entry.stretch - 1.0) / self.lambda_used
            if abs(steps - round(steps)) > 1e-9:
                raise PlanError(
                    f"block {name}: stretch {entry.stretch} is not 1 + k*lambda"
                    f" for lambda={self.lambda_used}"
                )

    def is_identity(self) -> bool:
        return all(e.stretch == 1.0 and e.split == 1 for e in self.per_block.values())


def psi(x: float, lam: float) -> int:
    """floor(x / lambda) with a snap against float noise at the boundary."""
    if x < 0:
        raise PlanError(f"psi expects x >= 0, got {x}")
    if not lam > 0:
        raise PlanError(f"lambda must be positive, got {lam}")
    q = x / lam
    nearest = round(q)
    if abs(q - nearest) <= _FLOOR_SNAP * max(1.0, abs(q)):
        return nearest
    return math.floor(q)


def phi(x: float, lam: float) -> float:
    """lambda * psi(x, lambda): the quantized stretch increment."""
    return lam * psi(x, lam)


def split_factor(n_minus: int, n_total: int, xi_l: float, lam: float) -> int:
    if n_total < 1 or not 0 <= n_minus <= n_total:
        raise PlanError(f"bad tally counts n_minus={n_minus}, n_total={n_total}")
    return 1 << psi((n_minus / n_total) * xi_l, lam)


def stretch_factor(n_plus: int, n_total: int, xi_l: float, lam: float) -> float:
    if n_total < 1 or not 0 <= n_plus <= n_total:
        raise PlanError(f"bad tally counts n_plus={n_plus}, n_total={n_total}")
    return 1.0 + phi((n_plus / n_total) * xi_l, lam)


def xi(plus_ratios, index: int) -> float:
    """Mean n_plus/n_total ratio of the stages after ``index``.

    ``plus_ratios`` is indexed by stage; entries may be ratios,
    SeparationTally objects, or None for stages that contribute nothing (no
    tallies, or only excluded blocks).  The final stage is always left out.
    An empty window yields 0, which makes every factor of the corresponding
    block identity.
    """
    window = list(plus_ratios)[index + 1 : max(index + 1, len(plus_ratios) - 1)]
    vals = [
        v.n_plus / v.n_total if isinstance(v, SeparationTally) else v
        for v in window
        if v is not None
    ]
    if not vals:
        return 0.0
    return sum(vals) / len(vals)


def stage_plus_ratios(ir: NetworkIR, tallies) -> list:
    """Per-stage mean of n_plus/n_total over non-excluded tallied blocks.

    Stages with nothing to contribute map to None.  For single-block stages
    this is just the block's own ratio; for inception-style stages it is the
    mean across the stage's analyzed blocks.
    """
    per_stage: list[list[float]] = [[] for _ in range(ir.num_stages)]
    for b in ir.blocks:
        if b.excluded:
            continue
        t = tallies.get(b.name)
        if t is not None:
            per_stage[b.stage].append(t.n_plus / t.n_total)
    return [sum(v) / len(v) if v else None for v in per_stage]


def _block_terms(tally: SeparationTally, xi_l: float) -> tuple[float, float]:
    return (
        (tally.n_plus / tally.n_total) * xi_l,
        (tally.n_minus / tally.n_total) * xi_l,
    )


def lambda_upper_bound(tallies) -> float:
    """Smallest lambda above which no factor can differ from identity.

    Takes the stage-ordered tally sequence of a chain (None where a stage
    has no tally).  The bound is the largest quantity ever floored: both
    terms for case-b layers, the split term only for case-a layers (they
    never stretch).  The final stage never participates.
    """
    tallies = list(tallies)
    ratios = [t.n_plus / t.n_total if t is not None else None for t in tallies]
    terms = []
    for i, t in enumerate(tallies[: max(0, len(tallies) - 1)]):
        if t is None:
            continue
        x = xi(ratios, i)
        x_plus, x_minus = _block_terms(t, x)
        if t.n_plus >= t.n_minus:
            terms.extend((x_plus, x_minus))
        else:
            terms.append(x_minus)
    if not terms:
        raise PlanError("no analyzable layers")
    return max(terms)


def build_plan(ir: NetworkIR, tallies, cfg: PlannerConfig) -> RefinementPlan:
    """Stretch/split factors for every block of the network.

    ``tallies`` maps block name to SeparationTally and must cover every
    non-excluded block; entries for excluded blocks are ignored.  The plan
    also records lambda_o computed from the same tallies.
    """
    for name in tallies:
        try:
            ir.block(name)
        except KeyError:
            raise PlanError(f"tally/IR mismatch: tally names unknown block {name!r}") from None
    for b in ir.blocks:
        if not b.excluded and b.name not in tallies:
            raise PlanError(f"tally/IR mismatch: no tally for block {b.name}")

    totals = {tallies[b.name].n_total for b in ir.blocks if not b.excluded}
    if len(totals) > 1:
        raise PlanError(f"tallies disagree on n_total: {sorted(totals)}")

    ratios = stage_plus_ratios(ir, tallies)
    entries: dict[str, PlanEntry] = {}
    terms: list[float] = []
    for b in ir.blocks:
        if b.excluded:
            entries[b.name] = PlanEntry(stretch=1.0, split=1, case="x")
            continue
        t = tallies[b.name]
        x = xi(ratios, b.stage)
        x_plus, x_minus = _block_terms(t, x)
        split = 1 << psi(x_minus, cfg.lam)
        if t.n_plus < t.n_minus:
            entries[b.name] = PlanEntry(stretch=1.0, split=split, case="a")
            terms.append(x_minus)
        else:
            stretch = 1.0 + phi(x_plus, cfg.lam)
            entries[b.name] = PlanEntry(stretch=stretch, split=split, case="b")
            terms.extend((x_plus, x_minus))
    return RefinementPlan(
        per_block=entries,
        lambda_used=cfg.lam,
        lambda_o=max(terms) if terms else 0.0,
    )


def serialize_plan(plan: RefinementPlan) -> str:
    lines = [
        f"lambda={plan.lambda_used!r}",
        f"lambda_o={plan.lambda_o!r}",
        "# xi aggregation: per-stage mean over analyzed blocks",
    ]
    for name in sorted(plan.per_block):
        e = plan.per_block[name]
        lines.append(f"plan {name} stretch={e.stretch!r} split={e.split} case={e.case}")
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> RefinementPlan:
    lam = None
    lam_o = None
    entries: dict[str, PlanEntry] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("lambda_o="):
            if lam_o is not None:
                raise PlanError(f"line {line_no}: duplicate lambda_o")
            lam_o = float(line.partition("=")[2])
        elif line.startswith("lambda="):
            if lam is not None:
                raise PlanError(f"line {line_no}: duplicate lambda")
            lam = float(line.partition("=")[2])
        elif line.startswith("plan "):
            tokens = line.split()
            if len(tokens) != 5:
                raise PlanError(f"line {line_no}: expected 'plan <block> stretch= split= case='")
            name = tokens[1]
            if name in entries:
                raise PlanError(f"line {line_no}: duplicate plan entry for {name}")
            fields = dict(tok.partition("=")[::2] for tok in tokens[2:])
            if set(fields) != {"stretch", "split", "case"}:
                raise PlanError(f"line {line_no}: bad fields {sorted(fields)}")
            try:
                entries[name] = PlanEntry(
                    stretch=float(fields["stretch"]),
                    split=int(fields["split"]),
                    case=fields["case"],
                )
            except ValueError as exc:
                raise PlanError(f"line {line_no}: {exc}") from None
        else:
            raise PlanError(f"line {line_no}: unrecognized line {line!r}")
    if lam is None or lam_o is None:
        raise PlanError("plan file must carry lambda= and lambda_o= headers")
    return RefinementPlan(per_block=entries, lambda_used=lam, lambda_o=lam_o)


def identity_plan(ir: NetworkIR, lam: float = 0.25) -> RefinementPlan:
    """A plan that leaves every block untouched."""
    entries = {
        b.name: PlanEntry(stretch=1.0, split=1, case="x" if b.excluded else "b")
        for b in ir.blocks
    }
    return RefinementPlan(per_block=entries, lambda_used=lam, lambda_o=0.0)
