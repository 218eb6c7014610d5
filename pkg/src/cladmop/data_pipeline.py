"""Trial ingestion, success-labeling rules, splits and leakage checks.

The pre-training corpus is built from unlabeled registry records by two
rules applied per canonical drug: every phase I-III trial of a marketed
drug counts as successful, and a trial counts as successful when the drug
went on to any later phase. Trials with neither kind of evidence are
excluded as uncertain rather than labeled. Synonyms collapse to one
canonical drug id before the rules run.
"""

from __future__ import annotations

import datetime as dt
import json
import warnings
from dataclasses import dataclass, replace

from .seeding import seeded_rng

PHASES = ("I", "II", "III", "IV")
PHASE_ORDER = {phase: i for i, phase in enumerate(PHASES)}
MODELING_PHASES = ("I", "II", "III")

REASON_UNRESOLVABLE_DRUG = "unresolvable_drug"
REASON_UNCERTAIN_OUTCOME = "uncertain_outcome"
REASON_PHASE_IV_SOURCE = "phase_iv_source"
REASON_NO_DRUGS = "no_drugs"


class DataFormatError(ValueError):
    pass


@dataclass
class TrialRecord:
    nct_id: str
    phase: str
    smiles: list[str]
    icd_codes: list[str]
    criteria_text: str
    start_date: str  # ISO-8601 YYYY-MM-DD
    label: int | None = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise DataFormatError(f"{self.nct_id}: unknown phase {self.phase!r}")
        dt.date.fromisoformat(self.start_date)
        if self.label is not None and self.label not in (0, 1):
            raise DataFormatError(f"{self.nct_id}: label must be 0 or 1")

    @property
    def date(self) -> dt.date:
        return dt.date.fromisoformat(self.start_date)

    @property
    def modeling_eligible(self) -> bool:
        return bool(self.smiles) and bool(self.icd_codes)

    def to_json_dict(self) -> dict:
        out = {
            "nct_id": self.nct_id,
            "phase": self.phase,
            "smiles": list(self.smiles),
            "icd_codes": list(self.icd_codes),
            "criteria_text": self.criteria_text,
            "start_date": self.start_date,
        }
        if self.label is not None:
            out["label"] = self.label
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TrialRecord":
        return cls(
            nct_id=obj["nct_id"],
            phase=obj["phase"],
            smiles=list(obj.get("smiles", [])),
            icd_codes=list(obj.get("icd_codes", [])),
            criteria_text=obj.get("criteria_text", ""),
            start_date=obj["start_date"],
            label=obj.get("label"),
        )


def load_trials(path) -> list[TrialRecord]:
    """Parse a JSON-lines trial file; malformed lines and duplicate ids fail
    with line numbers, ineligible records are kept with a warning."""
    records: list[TrialRecord] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                record = TrialRecord.from_json_dict(obj)
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise DataFormatError(f"{path}: line {lineno}: {e}") from None
            if record.nct_id in seen:
                raise DataFormatError(
                    f"{path}: duplicate nct_id {record.nct_id!r} on lines "
                    f"{seen[record.nct_id]} and {lineno}"
                )
            seen[record.nct_id] = lineno
            if not record.modeling_eligible:
                warnings.warn(
                    f"{record.nct_id}: missing smiles or icd_codes; "
                    "record kept but ineligible for modeling"
                )
            records.append(record)
    return records


def save_trials(path, records: list[TrialRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")


class DrugEntityIndex:
    """Synonym-to-canonical-id map plus the set of marketed drugs."""

    def __init__(self, canonical: dict[str, str], marketed: set[str]):
        self.canonical = {self._norm(k): v for k, v in canonical.items()}
        self.marketed = set(marketed)
        unknown = self.marketed - set(self.canonical.values())
        if unknown:
            raise ValueError(f"marketed ids not in synonym map: {sorted(unknown)}")

    @staticmethod
    def _norm(name: str) -> str:
        return name.strip().lower()

    @classmethod
    def from_files(cls, synonyms_path, marketed_path) -> "DrugEntityIndex":
        canonical: dict[str, str] = {}
        with open(synonyms_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    synonym, canon = line.split("\t")
                except ValueError:
                    raise DataFormatError(
                        f"{synonyms_path}: line {lineno}: expected "
                        "'synonym<TAB>canonical_id'"
                    ) from None
                canonical[synonym] = canon
        marketed = set()
        with open(marketed_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    marketed.add(line)
        return cls(canonical, marketed)

    def resolve(self, name: str) -> str | None:
        return self.canonical.get(self._norm(name))


@dataclass
class Exclusion:
    nct_id: str
    reason_code: str
    detail: str


@dataclass
class SctResult:
    records: list[TrialRecord]
    exclusions: list[Exclusion]

    def write_exclusions(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("nct_id,reason_code,detail\n")
            for e in self.exclusions:
                fh.write(f"{e.nct_id},{e.reason_code},{e.detail}\n")


def build_sct(trials: list[TrialRecord], index: DrugEntityIndex) -> SctResult:
    """Label trials successful by the marketed and phase-progression rules.

    A multi-drug trial qualifies only if every one of its canonical drugs
    satisfies a rule. Phase IV trials serve as progression evidence but are
    never emitted. Output ordering is by nct_id, so the result cannot depend
    on input order.
    """
    ordered = sorted(trials, key=lambda t: t.nct_id)

    resolved: dict[str, list[str] | None] = {}
    for t in ordered:
        drugs = []
        for name in t.smiles:
            canon = index.resolve(name)
            if canon is None:
                drugs = None
                break
            drugs.append(canon)
        resolved[t.nct_id] = drugs

    # phases observed per canonical drug, over resolvable trials only
    drug_phases: dict[str, set[int]] = {}
    for t in ordered:
        drugs = resolved[t.nct_id]
        if not drugs:
            continue
        for d in set(drugs):
            drug_phases.setdefault(d, set()).add(PHASE_ORDER[t.phase])

    def has_evidence(drug: str, phase_idx: int) -> bool:
        if drug in index.marketed:
            return True
        return any(p > phase_idx for p in drug_phases.get(drug, ()))

    records: list[TrialRecord] = []
    exclusions: list[Exclusion] = []
    for t in ordered:
        drugs = resolved[t.nct_id]
        if drugs is None:
            bad = next(n for n in t.smiles if index.resolve(n) is None)
            exclusions.append(Exclusion(t.nct_id, REASON_UNRESOLVABLE_DRUG, bad))
            continue
        if not drugs:
            exclusions.append(Exclusion(t.nct_id, REASON_NO_DRUGS, ""))
            continue
        if t.phase == "IV":
            exclusions.append(Exclusion(
                t.nct_id, REASON_PHASE_IV_SOURCE,
                "progression evidence only; phase IV is not a modeling phase"))
            continue
        phase_idx = PHASE_ORDER[t.phase]
        if all(has_evidence(d, phase_idx) for d in set(drugs)):
            records.append(replace(t, label=1))
        else:
            missing = sorted(d for d in set(drugs) if not has_evidence(d, phase_idx))
            exclusions.append(Exclusion(
                t.nct_id, REASON_UNCERTAIN_OUTCOME, ";".join(missing)))
    return SctResult(records, exclusions)


@dataclass
class DatasetSplit:
    train: list[TrialRecord]
    validation: list[TrialRecord]
    test: list[TrialRecord]
    cut_date: str
    seed: int


def _validation_count(n: int, fraction: float) -> int:
    """Largest k with k == round(fraction * (n - k)): validation is a
    fraction of the remaining train set and the three sets stay disjoint."""
    k = int(round(fraction * n / (1.0 + fraction)))
    for candidate in (k, k + 1, k - 1):
        if candidate >= 0 and candidate == round(fraction * (n - candidate)):
            return candidate
    return k


def temporal_split(trials: list[TrialRecord], cut_date: str, seed: int,
                   val_fraction: float = 0.15) -> DatasetSplit:
    """Earlier trials train, later trials test; validation is a seeded
    sample carved out of the train side."""
    cut = dt.date.fromisoformat(cut_date)
    earlier = sorted([t for t in trials if t.date <= cut], key=lambda t: t.nct_id)
    later = sorted([t for t in trials if t.date > cut], key=lambda t: t.nct_id)
    if not earlier or not later:
        raise ValueError(
            f"cut date {cut_date} leaves an empty side "
            f"(train={len(earlier)}, test={len(later)})"
        )
    k = _validation_count(len(earlier), val_fraction)
    rng = seeded_rng(seed, "temporal-split")
    val_idx = set(rng.choice(len(earlier), size=k, replace=False).tolist())
    validation = [t for i, t in enumerate(earlier) if i in val_idx]
    train = [t for i, t in enumerate(earlier) if i not in val_idx]
    return DatasetSplit(train, validation, later, cut_date, seed)


@dataclass
class LeakageReport:
    passed: bool
    shared_ids: list[str]
    case_warnings: list[str]


def leakage_check(pretrain_set: list[TrialRecord],
                  test_set: list[TrialRecord]) -> LeakageReport:
    """Ids are compared case-sensitively; case-insensitive collisions are
    reported as warnings, not failures."""
    pre_ids = {t.nct_id for t in pretrain_set}
    test_ids = {t.nct_id for t in test_set}
    shared = sorted(pre_ids & test_ids)
    pre_folded = {i.lower(): i for i in pre_ids}
    warnings_list = sorted(
        i for i in test_ids
        if i not in pre_ids and i.lower() in pre_folded
    )
    return LeakageReport(not shared, shared, warnings_list)


def disease_combination(trial: TrialRecord) -> tuple[str, ...]:
    return tuple(sorted(trial.icd_codes))


def new_disease_subset(train_sets: list[list[TrialRecord]],
                       test_set: list[TrialRecord]) -> list[TrialRecord]:
    """Test trials whose exact code multiset never occurs in any train set."""
    seen: set[tuple[str, ...]] = set()
    for train in train_sets:
        for t in train:
            seen.add(disease_combination(t))
    return [t for t in test_set if disease_combination(t) not in seen]


@dataclass
class CorpusStats:
    """Headline dataset statistics."""

    n_trials: int
    n_drugs: int
    n_diseases: int
    avg_criteria_words: float
    unique_drug_combinations: int
    unique_disease_combinations: int

    @classmethod
    def compute(cls, trials: list[TrialRecord]) -> "CorpusStats":
        drugs = {name for t in trials for name in t.smiles}
        diseases = {code for t in trials for code in t.icd_codes}
        drug_combos = {tuple(sorted(t.smiles)) for t in trials}
        disease_combos = {disease_combination(t) for t in trials}
        words = [len(t.criteria_text.split()) for t in trials]
        avg = sum(words) / len(words) if words else 0.0
        return cls(len(trials), len(drugs), len(diseases), avg,
                   len(drug_combos), len(disease_combos))

    def lines(self) -> list[str]:
        return [
            f"Number of trials\t{self.n_trials}",
            f"Number of drugs\t{self.n_drugs}",
            f"Number of diseases\t{self.n_diseases}",
            f"Avg. words in eligibility criteria\t{self.avg_criteria_words:.2f}",
            f"Unique drug combinations\t{self.unique_drug_combinations}",
            f"Unique disease combinations\t{self.unique_disease_combinations}",
        ]
