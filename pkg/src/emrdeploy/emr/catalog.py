"""Fixed clinical vocabulary of the simulated EMR.

Demographic proportions follow the retrospective CBC cohort breakdown and
component prevalences the retrospective abnormal rates of the deployed lab
models; both only set generator defaults.
"""

from __future__ import annotations

from dataclasses import dataclass

SEXES = ("Female", "Male", "Unknown")
SEX_WEIGHTS = (0.532, 0.4675, 0.0005)

RACES = ("White", "Other", "Asian", "Black", "Unknown", "PacificIslander", "NativeAmerican")
RACE_WEIGHTS = (0.515, 0.215, 0.183, 0.042, 0.029, 0.013, 0.003)

EVENT_KINDS = ("Condition", "Medication", "LabResult")


@dataclass(frozen=True)
class ComponentSpec:
    code: str
    name: str
    mean: float
    sd: float
    direction: int  # +1: abnormal high when severe, -1: abnormal low
    prevalence: float  # target abnormal rate of the ordered result
    decimals: int


COMPONENTS: dict[str, ComponentSpec] = {
    c.code: c
    for c in (
        ComponentSpec("HCT", "Hematocrit", 40.0, 5.0, -1, 0.47, 1),
        ComponentSpec("HGB", "Hemoglobin", 13.5, 1.8, -1, 0.50, 1),
        ComponentSpec("PLT", "Platelets", 250.0, 70.0, -1, 0.26, 0),
        ComponentSpec("WBC", "White blood cell", 7.5, 2.5, 1, 0.29, 1),
        ComponentSpec("ALB", "Albumin", 4.0, 0.5, -1, 0.20, 1),
        ComponentSpec("BUN", "Blood urea nitrogen", 15.0, 6.0, 1, 0.22, 0),
        ComponentSpec("CA", "Calcium", 9.4, 0.5, -1, 0.11, 1),
        ComponentSpec("CO2", "Carbon dioxide", 25.0, 3.0, -1, 0.16, 0),
        ComponentSpec("CREAT", "Creatinine", 1.0, 0.3, 1, 0.31, 2),
        ComponentSpec("K", "Potassium", 4.2, 0.4, 1, 0.06, 1),
        ComponentSpec("NA", "Sodium", 139.0, 3.0, -1, 0.12, 0),
        ComponentSpec("MG", "Magnesium", 2.0, 0.2, -1, 0.15, 1),
    )
}

PANELS: dict[str, tuple[str, ...]] = {
    "CBC": ("HCT", "HGB", "PLT", "WBC"),
    "METABOLIC": ("ALB", "BUN", "CA", "CO2", "CREAT", "K", "NA"),
    "MAGNESIUM": ("MG",),
}

LAB_CODES: tuple[str, ...] = tuple(COMPONENTS)
