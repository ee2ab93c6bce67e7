"""MOAKS sub-grades -> binary phenotype labels, dataset balancing, and
demographics summaries.

Sub-grades are addressed by dotted names (``cartilage.medial_femur``,
``meniscus.lateral``, ``bml.patella``). A phenotype rule is a boolean
expression over threshold conditions on those names; if any sub-grade a
rule reads is missing from a record, the phenotype is *absent* (None),
not False.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .errors import BalancingError, ConfigError

# Tibiofemoral subregions (femur/tibia, medial/lateral) plus the two
# patellofemoral subregions used for cartilage and BML grading.
TFJ_SUBREGIONS = ("medial_femur", "medial_tibia", "lateral_femur", "lateral_tibia")
PFJ_SUBREGIONS = ("patella", "trochlea")
CARTILAGE_SUBREGIONS = TFJ_SUBREGIONS + PFJ_SUBREGIONS
BML_SUBREGIONS = TFJ_SUBREGIONS + PFJ_SUBREGIONS
MENISCUS_REGIONS = ("medial", "lateral")

# dotted sub-grade name -> inclusive ordinal range
GRADE_RANGES: dict[str, tuple[int, int]] = {}
for _sub in CARTILAGE_SUBREGIONS:
    GRADE_RANGES[f"cartilage.{_sub}"] = (0, 3)
for _sub in BML_SUBREGIONS:
    GRADE_RANGES[f"bml.{_sub}"] = (0, 3)
for _reg in MENISCUS_REGIONS:
    GRADE_RANGES[f"meniscus.{_reg}"] = (0, 4)

PHENOTYPES = ("cartilage_meniscus", "subchondral_bone")


@dataclass
class MoaksRecord:
    subject_id: str
    knee_side: str  # "left" | "right"
    cartilage: dict[str, int] = field(default_factory=dict)
    meniscus: dict[str, int] = field(default_factory=dict)
    bml: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.knee_side not in ("left", "right"):
            raise ConfigError(f"knee_side must be left/right, got {self.knee_side!r}")
        for group, grades in (("cartilage", self.cartilage),
                              ("meniscus", self.meniscus),
                              ("bml", self.bml)):
            for sub, grade in grades.items():
                name = f"{group}.{sub}"
                if name not in GRADE_RANGES:
                    raise ConfigError(f"unknown sub-grade {name!r}")
                lo, hi = GRADE_RANGES[name]
                if not (lo <= grade <= hi):
                    raise ConfigError(
                        f"{name} grade {grade} outside ordinal range [{lo}, {hi}]")

    def grade(self, name: str) -> Optional[int]:
        """Look up a dotted sub-grade name; None when missing."""
        if name not in GRADE_RANGES:
            raise ConfigError(f"unknown sub-grade {name!r}")
        group, sub = name.split(".", 1)
        return getattr(self, group).get(sub)


@dataclass(frozen=True)
class PhenotypeLabel:
    """None means the phenotype could not be determined (missing sub-grades)."""
    cartilage_meniscus: Optional[bool] = None
    subchondral_bone: Optional[bool] = None

    def get(self, phenotype: str) -> Optional[bool]:
        if phenotype not in PHENOTYPES:
            raise ConfigError(f"unknown phenotype {phenotype!r}")
        return getattr(self, phenotype)


# ---------------------------------------------------------------------------
# Rule sets

class PhenotypeRuleSet:
    """One boolean rule per phenotype.

    Rule nodes: {"grade": <dotted name>, "min": <int>} leaf conditions,
    combined with {"all": [...]} / {"any": [...]}. JSON-serializable.
    """

    def __init__(self, rules: Mapping[str, dict]):
        self.rules = dict(rules)
        for phen, node in self.rules.items():
            if phen not in PHENOTYPES:
                raise ConfigError(f"unknown phenotype {phen!r} in rule set")
            for name in _referenced_grades(node):
                if name not in GRADE_RANGES:
                    raise ConfigError(f"rule references unknown sub-grade {name!r}")

    def referenced(self, phenotype: str) -> list[str]:
        return _referenced_grades(self.rules[phenotype])

    def to_json(self) -> str:
        return json.dumps(self.rules, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PhenotypeRuleSet":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"rule set is not valid JSON: {e}") from e
        return cls(data)

    @classmethod
    def load(cls, path) -> "PhenotypeRuleSet":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def _referenced_grades(node: dict) -> list[str]:
    if "grade" in node:
        return [node["grade"]]
    for key in ("all", "any"):
        if key in node:
            out: list[str] = []
            for child in node[key]:
                out.extend(_referenced_grades(child))
            return out
    raise ConfigError(f"malformed rule node: {node!r}")


def _eval_node(node: dict, record: MoaksRecord) -> bool:
    if "grade" in node:
        value = record.grade(node["grade"])
        assert value is not None  # missing grades are screened out earlier
        return value >= int(node["min"])
    if "all" in node:
        return all(_eval_node(c, record) for c in node["all"])
    return any(_eval_node(c, record) for c in node["any"])


def default_rules() -> PhenotypeRuleSet:
    """Shipped default thresholds (placeholders pending the exact clinical
    definitions): cartilage/meniscus requires meniscus damage >= 2 in either
    meniscus plus cartilage >= 2 in both a medial and a lateral TFJ
    subregion; subchondral bone requires a BML >= 2 in any TFJ/PFJ
    subregion."""
    cart_men = {"all": [
        {"any": [{"grade": f"meniscus.{r}", "min": 2} for r in MENISCUS_REGIONS]},
        {"any": [{"grade": f"cartilage.{s}", "min": 2}
                 for s in ("medial_femur", "medial_tibia")]},
        {"any": [{"grade": f"cartilage.{s}", "min": 2}
                 for s in ("lateral_femur", "lateral_tibia")]},
    ]}
    bone = {"any": [{"grade": f"bml.{s}", "min": 2} for s in BML_SUBREGIONS]}
    return PhenotypeRuleSet({"cartilage_meniscus": cart_men, "subchondral_bone": bone})


def to_phenotypes(record: MoaksRecord, rules: PhenotypeRuleSet) -> PhenotypeLabel:
    """Apply the rule set; a phenotype is None if any sub-grade its rule
    reads is missing from the record."""
    values: dict[str, Optional[bool]] = {}
    for phen in PHENOTYPES:
        node = rules.rules.get(phen)
        if node is None:
            values[phen] = None
            continue
        if any(record.grade(name) is None for name in rules.referenced(phen)):
            values[phen] = None
        else:
            values[phen] = _eval_node(node, record)
    return PhenotypeLabel(**values)


# ---------------------------------------------------------------------------
# Balancing

def balance_dataset(labels: Sequence[tuple[str, bool]],
                    positive_fraction: Fraction,
                    seed: int) -> list[str]:
    """All positive ids plus a seeded random negative subset such that the
    positive fraction is positive_fraction. Non-divisible counts round
    half-up on the negative count."""
    positive_fraction = Fraction(positive_fraction)
    if not (0 < positive_fraction < 1):
        raise BalancingError(f"positive_fraction must be in (0,1), got {positive_fraction}")
    positives = [sid for sid, y in labels if y]
    negatives = [sid for sid, y in labels if not y]
    if not positives:
        raise BalancingError("no positive samples to balance around")
    want = Fraction(len(positives)) * (1 - positive_fraction) / positive_fraction
    n_neg = int(math.floor(want + Fraction(1, 2)))  # round half-up
    if len(negatives) < n_neg:
        raise BalancingError(
            f"need {n_neg} negatives for fraction {positive_fraction}, have {len(negatives)}")
    rng = random.Random(seed)
    chosen = rng.sample(negatives, n_neg)
    return positives + chosen


# ---------------------------------------------------------------------------
# Demographics

def _round2(x: float) -> str:
    """Two decimals, half-up."""
    from decimal import Decimal, ROUND_HALF_UP
    return str(Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_fraction(count: int, denom: int) -> str:
    pct = 100.0 * count / denom if denom else float("nan")
    return f"{_round2(pct)} ({count}/{denom})"


def demographics_summary(records: Sequence[Mapping],
                         numeric_fields: Sequence[str] = ("age", "bmi"),
                         categorical_fields: Mapping[str, Sequence] = None) -> dict:
    """Mean +/- sd for numeric fields and 'pct (count/denominator)' strings
    for categorical values, denominators counting non-missing entries only."""
    if categorical_fields is None:
        categorical_fields = {
            "sex": ("male", "female"),
            "knee_side": ("left", "right"),
            "cartilage_meniscus": (True,),
            "subchondral_bone": (True,),
        }
    out: dict = {}
    for f in numeric_fields:
        vals = [r[f] for r in records if r.get(f) is not None]
        if not vals:
            continue
        mean = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
        out[f] = {"mean": mean, "sd": sd, "n": len(vals),
                  "display": f"{_round2(mean)} ± {_round2(sd)}"}
    for f, values in categorical_fields.items():
        present = [r[f] for r in records if r.get(f) is not None]
        denom = len(present)
        if denom == 0:
            continue
        out[f] = {}
        for v in values:
            count = sum(1 for p in present if p == v)
            out[f][str(v)] = {"count": count, "denominator": denom,
                              "display": format_fraction(count, denom)}
    return out


# ---------------------------------------------------------------------------
# Table ingestion

def read_moaks_table(path, delimiter: str = ",") -> list[MoaksRecord]:
    """Load MOAKS records from a delimited table. Header columns:
    subject_id, knee_side, then dotted sub-grade names; empty cells mean
    a missing sub-grade. Extra columns are ignored."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        for row in reader:
            grades: dict[str, dict[str, int]] = {"cartilage": {}, "meniscus": {}, "bml": {}}
            for col, raw in row.items():
                if col in GRADE_RANGES and raw not in (None, ""):
                    group, sub = col.split(".", 1)
                    grades[group][sub] = int(raw)
            records.append(MoaksRecord(
                subject_id=row["subject_id"],
                knee_side=row["knee_side"],
                cartilage=grades["cartilage"],
                meniscus=grades["meniscus"],
                bml=grades["bml"],
            ))
    return records
