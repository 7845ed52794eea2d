"""Tabular nodule/patient record schema and radiology-report templating.

Each record carries 13 fields: 5 nodule-level attributes (attenuation,
location, two diameters, margin type) and 8 patient-level attributes
(age, emphysema diagnosis, gender, five family-history flags). Records
can be rendered into a fixed one-sentence screening report and parsed
back out of it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields

ATTENUATIONS = ("Soft", "GroundGlass", "PartSolid")
LOCATIONS = ("RUL", "RML", "RLL", "LUL", "LLL", "Lingula")
MARGINS = ("Spiculated", "Smooth", "PoorlyDefined")
GENDERS = ("Male", "Female")

# Column names used in persisted metadata, one per record field.
TABLE_COLUMNS = (
    "SCT_PRE_ATT",
    "SCT_EPI_LOC",
    "SCT_LONG_DIA",
    "SCT_PERP_DIA",
    "SCT_MARGINS",
    "age",
    "diagemph",
    "gender",
    "famfather",
    "fammother",
    "fambrother",
    "famsister",
    "famchild",
)

NODULE_FIELDS = ("att", "loc", "long_dia", "perp_dia", "margins")
PATIENT_FIELDS = (
    "age",
    "diagemph",
    "gender",
    "famfather",
    "fammother",
    "fambrother",
    "famsister",
    "famchild",
)

FAMILY_FIELDS = ("famfather", "fammother", "fambrother", "famsister", "famchild")

ATT_PHRASES = {"Soft": "soft", "GroundGlass": "ground glass", "PartSolid": "part solid"}
LOC_PHRASES = {
    "RUL": "right upper lobe",
    "RML": "right middle lobe",
    "RLL": "right lower lobe",
    "LUL": "left upper lobe",
    "LLL": "left lower lobe",
    "Lingula": "lingula",
}
MARGIN_PHRASES = {
    "Spiculated": "spiculated",
    "Smooth": "smooth",
    "PoorlyDefined": "poorly defined",
}

EMPHYSEMA_CLAUSE = " with prior diagnosis of emphysema"
FAMILY_CLAUSE = " and family history of cancer"


@dataclass(frozen=True)
class EhrRecord:
    """One row of nodule plus patient metadata.

    Invariants enforced at construction: categorical values must be members
    of their declared sets, diameters must satisfy long_dia >= perp_dia > 0,
    and age must be a positive integer.
    """

    att: str
    loc: str
    long_dia: float
    perp_dia: float
    margins: str
    age: int
    diagemph: bool
    gender: str
    famfather: bool
    fammother: bool
    fambrother: bool
    famsister: bool
    famchild: bool

    def __post_init__(self):
        if self.att not in ATTENUATIONS:
            raise ValueError(f"att must be one of {ATTENUATIONS}, got {self.att!r}")
        if self.loc not in LOCATIONS:
            raise ValueError(f"loc must be one of {LOCATIONS}, got {self.loc!r}")
        if self.margins not in MARGINS:
            raise ValueError(f"margins must be one of {MARGINS}, got {self.margins!r}")
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        if not (self.long_dia >= self.perp_dia > 0):
            raise ValueError(
                f"diameters must satisfy long_dia >= perp_dia > 0, "
                f"got long={self.long_dia}, perp={self.perp_dia}"
            )
        if not isinstance(self.age, int) or self.age <= 0:
            raise ValueError(f"age must be a positive integer, got {self.age!r}")

    @property
    def any_family_history(self) -> bool:
        return any(getattr(self, f) for f in FAMILY_FIELDS)

    def to_row(self) -> dict:
        """Serialize to a dict keyed by the persisted column names."""
        values = [getattr(self, f.name) for f in fields(self)]
        return dict(zip(TABLE_COLUMNS, values))

    @classmethod
    def from_row(cls, row: dict) -> "EhrRecord":
        field_names = [f.name for f in fields(cls)]
        kwargs = {name: row[col] for name, col in zip(field_names, TABLE_COLUMNS)}
        kwargs["age"] = int(kwargs["age"])
        for name in ("diagemph", *FAMILY_FIELDS):
            kwargs[name] = bool(kwargs[name])
        return cls(**kwargs)


def format_mm(value: float) -> str:
    """Render a diameter with at most one decimal place, no trailing '.0'."""
    rounded = round(float(value), 1)
    if rounded == int(rounded):
        return str(int(rounded))
    return f"{rounded:.1f}"


def render_report(ehr: EhrRecord) -> str:
    """Fill the fixed screening-report template for one record.

    The emphysema clause appears iff ``diagemph`` is set; the family-history
    clause appears iff any family flag is set. Output is byte-deterministic.
    """
    emph = EMPHYSEMA_CLAUSE if ehr.diagemph else ""
    family = FAMILY_CLAUSE if ehr.any_family_history else ""
    return (
        "Lung cancer screening with low dose computed tomography performed "
        f"for this {ehr.age} years old {ehr.gender.lower()}{emph}{family}. "
        f"A {ATT_PHRASES[ehr.att]} nodule, with {MARGIN_PHRASES[ehr.margins]} margin, "
        f"{format_mm(ehr.long_dia)} mm in size is present in the {LOC_PHRASES[ehr.loc]}."
    )


def _alternation(phrases: dict) -> str:
    # Longest first so e.g. "right lower lobe" wins over any prefix.
    return "|".join(sorted((re.escape(p) for p in phrases.values()), key=len, reverse=True))


_REPORT_RE = re.compile(
    r"^Lung cancer screening with low dose computed tomography performed "
    r"for this (?P<age>\d+) years old (?P<gender>male|female)"
    r"(?P<emph> with prior diagnosis of emphysema)?"
    r"(?P<family> and family history of cancer)?\. "
    rf"A (?P<att>{_alternation(ATT_PHRASES)}) nodule, "
    rf"with (?P<margin>{_alternation(MARGIN_PHRASES)}) margin, "
    rf"(?P<dia>\d+(?:\.\d)?) mm in size is present in the "
    rf"(?P<loc>{_alternation(LOC_PHRASES)})\.$"
)


def parse_report(text: str) -> dict:
    """Invert :func:`render_report` over the fixed template.

    Returns the recoverable fields: age, gender, attenuation, margin,
    long diameter, location, and the two clause booleans. Raises
    ``ValueError`` if the text does not match the template.
    """
    m = _REPORT_RE.match(text)
    if m is None:
        raise ValueError(f"text does not match the report template: {text!r}")
    inv_att = {v: k for k, v in ATT_PHRASES.items()}
    inv_margin = {v: k for k, v in MARGIN_PHRASES.items()}
    inv_loc = {v: k for k, v in LOC_PHRASES.items()}
    inv_gender = {g.lower(): g for g in GENDERS}
    return {
        "age": int(m.group("age")),
        "gender": inv_gender[m.group("gender")],
        "att": inv_att[m.group("att")],
        "margins": inv_margin[m.group("margin")],
        "long_dia": float(m.group("dia")),
        "loc": inv_loc[m.group("loc")],
        "diagemph": m.group("emph") is not None,
        "any_family_history": m.group("family") is not None,
    }
