import numpy as np
import pytest

from cladmop.encoders import IcdTree, SmilesSegmentDict

# small but real-shaped SMILES corpus for round-trip and embedding tests
SMILES_CORPUS = [
    "CCO",
    "CC(=O)OC1=CC=CC=C1C(=O)O",
    "C(Cl)Br",
    "[Na+].[Cl-]",
    "C1CCCCC1",
    "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "O=C(C)Oc1ccccc1C(=O)O",
    "N[C@@H](C)C(=O)O",
    "ClCCl",
    "BrC(Br)Br",
    "C%12CCCCC%12",
]


@pytest.fixture
def icd_tree():
    parent = {
        "A00-B99": "ICD10",
        "C00-D49": "ICD10",
        "E00-E89": "ICD10",
        "A00": "A00-B99",
        "A00.0": "A00",
        "A01": "A00-B99",
        "C34": "C00-D49",
        "C34.1": "C34",
        "C50": "C00-D49",
        "E11": "E00-E89",
        "E11.9": "E11",
    }
    return IcdTree(parent, "ICD10")


@pytest.fixture
def seg_dict():
    return SmilesSegmentDict.hash_fallback(d_mol=8, seed=3)


@pytest.fixture
def f64_seg_dict():
    d = SmilesSegmentDict.hash_fallback(d_mol=8, seed=3)

    class F64View:
        d_mol = d.d_mol
        source = d.source

        def vector(self, seg):
            return d.vector(seg).astype(np.float64)

    return F64View()
