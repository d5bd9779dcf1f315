"""Export lookup tables and frozen reference features from `peptides`.

Run once with `pip install peptides==0.3.1`:

    python scripts/freeze_physchem_reference.py

Writes the CSV assets under crates/core/data/ and the 20-sequence
reference fixture under crates/core/tests/fixtures/.
"""

import csv
import os

import peptides
import peptides.tables as t

assert peptides.__version__ == "0.3.1", peptides.__version__

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..")
DATA = os.path.join(ROOT, "crates", "core", "data")
FIXTURES = os.path.join(ROOT, "crates", "core", "tests", "fixtures")
AA = "ACDEFGHIKLMNPQRSTVWY"

# (file stem, table group, column prefix, dims)
DESCRIPTOR_SETS = [
    ("blosum", t.BLOSUM, "BLOSUM", 10),
    ("cruciani", t.CRUCIANI, "PP", 3),
    ("fasgai", t.FASGAI, "F", 6),
    ("kidera", t.KIDERA, "KF", 10),
    ("ms_whim", t.MSWHIM, "MSWHIM", 3),
    ("pcp", t.PCP_DESCRIPTORS, "E", 5),
    ("protfp", t.PROTFP, "ProtFP", 8),
    ("sneath", t.SNEATH, "SV", 4),
    ("st_scales", t.ST_SCALES, "ST", 8),
    ("t_scales", t.T_SCALES, "T", 5),
    ("vhse", t.VHSE, "VHSE", 8),
    ("z_scales", t.Z_SCALES, "Z", 5),
]

PROPERTY_NAMES = [
    "aliphatic_index",
    "autocorrelation",
    "autocovariance",
    "boman",
    "charge",
    "hydrophobic_moment_alpha",
    "hydrophobic_moment_beta",
    "hydrophobicity",
    "instability_index",
    "isoelectric_point",
    "mass_shift",
    "molecular_weight",
    "mz",
]

FIXTURE_SEQUENCES = [
    "CASSLAPGATNEKLFF",
    "GILGFVFTL",
    "NLVPMVATV",
    "GLCTLVAML",
    "CASSIRSSYEQYF",
    "CASSPDRGGYTF",
    "KLGGALQAK",
    "YLQPRTFLL",
    "AVFDRKSDAK",
    "CASRPGLAGGRPEQYF",
    "ELAGIGILTV",
    "CSARDRTGNGYTF",
    "RAKFKQLL",
    "CASSQDWGHEQYF",
    "FLKEKGGL",
    "CAWSVGQGAMNTEAFF",
    "IPSINVHHY",
    "CASSYSTGDEQYF",
    "MW",
    "ACDEFGHIKLMNPQRSTVWY",
]


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def export_tables():
    for stem, group, prefix, dims in DESCRIPTOR_SETS:
        cols = [f"{prefix}{i + 1}" for i in range(dims)]
        assert set(cols) == set(group), (stem, sorted(group))
        rows = [[aa] + [float(group[c][aa]) for c in cols] for aa in AA]
        write_table(os.path.join(DATA, "descriptors", f"{stem}.csv"), ["aa"] + cols, rows)

    hyd = t.HYDROPHOBICITY
    write_table(
        os.path.join(DATA, "hydrophobicity.csv"),
        ["aa", "eisenberg", "kyte_doolittle"],
        [[aa, float(hyd["Eisenberg"][aa]), float(hyd["KyteDoolittle"][aa])] for aa in AA],
    )
    write_table(
        os.path.join(DATA, "boman.csv"),
        ["aa", "solubility"],
        [[aa, float(t.BOMAN["Boman"].get(aa, 0.0))] for aa in AA],
    )
    pk = t.PK["Lehninger"]
    sign = t.CHARGE["sign"]
    groups = [aa for aa in AA if aa in pk] + ["nTer", "cTer"]
    write_table(
        os.path.join(DATA, "pka_lehninger.csv"),
        ["aa", "pka", "sign"],
        [[g, float(pk[g]), float(sign.get(g, 1.0 if g == "nTer" else -1.0))] for g in groups],
    )
    mw = t.MOLECULAR_WEIGHT
    write_table(
        os.path.join(DATA, "residue_masses.csv"),
        ["aa", "average", "monoisotopic"],
        [[aa, float(mw["expasy"][aa]), float(mw["monoisotopic"][aa])] for aa in AA]
        + [["H2O", float(mw["expasy"]["H2O"]), float(mw["monoisotopic"]["H2O"])]],
    )
    shift = t.MASS_SHIFT["silac_13c"]
    write_table(
        os.path.join(DATA, "mass_shift_silac13c.csv"),
        ["aa", "shift"],
        [[aa, float(shift.get(aa, 0.0))] for aa in AA],
    )
    diwv = t.INSTABILITY["Guruprasad"]
    write_table(
        os.path.join(DATA, "instability_diwv.csv"),
        ["dipeptide", "weight"],
        [[a + b, float(diwv.get(a + b, 1.0))] for a in AA for b in AA],
    )


def reference_features(seq):
    p = peptides.Peptide(seq)
    descriptor_part = []
    for _, group, prefix, dims in DESCRIPTOR_SETS:
        cols = [f"{prefix}{i + 1}" for i in range(dims)]
        profile_means = [sum(p.profile(group[c])) / len(p) for c in cols]
        descriptor_part.extend(profile_means)
    # cross-check against the package's own per-set accessors
    d = p.descriptors()
    flat = [d[f"{prefix}{i + 1}"] for _, _, prefix, dims in DESCRIPTOR_SETS for i in range(dims)]
    assert flat == descriptor_part
    eisenberg = t.HYDROPHOBICITY["Eisenberg"]
    props = [
        p.aliphatic_index(),
        p.auto_correlation(eisenberg, lag=1),
        p.auto_covariance(eisenberg, lag=1),
        p.boman(),
        p.charge(pH=7.0, pKscale="Lehninger"),
        p.hydrophobic_moment(window=11, angle=100),
        p.hydrophobic_moment(window=11, angle=160),
        p.hydrophobicity(scale="KyteDoolittle"),
        p.instability_index(),
        p.isoelectric_point(pKscale="Lehninger"),
        p.mass_shift(aa_shift="silac_13c"),
        p.molecular_weight(average="expasy"),
        p.mz(charge=2),
    ]
    return descriptor_part + [float(x) for x in props]


def export_fixture():
    names = [f"{prefix}{i + 1}" for _, _, prefix, dims in DESCRIPTOR_SETS for i in range(dims)]
    header = ["sequence"] + names + PROPERTY_NAMES
    assert len(header) == 89
    rows = [[s] + reference_features(s) for s in FIXTURE_SEQUENCES]
    write_table(os.path.join(FIXTURES, "physchem_reference.csv"), header, rows)


if __name__ == "__main__":
    export_tables()
    export_fixture()
