#!/usr/bin/env python3
"""Fetch the UCI Adult and German credit raw files and write headered CSVs.

The raw files are taken from the `responsibly` wheel, which bundles the
canonical UCI copies. Any other source of `adult.data` / `german.data` works
too: pass --adult-raw / --german-raw to skip the download.

Output:
  data/adult.csv   15 columns, header row, '?' kept as the missing token
  data/german.csv  21 columns, header row
"""

import argparse
import pathlib
import subprocess
import sys
import tempfile
import zipfile

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num",
    "marital-status", "occupation", "relationship", "race", "sex",
    "capital-gain", "capital-loss", "hours-per-week", "native-country",
    "income",
]

GERMAN_COLUMNS = [
    "checking", "duration", "credit-history", "purpose", "amount",
    "savings", "employment", "installment-rate", "personal-status",
    "other-debtors", "residence-since", "property", "age",
    "other-installment", "housing", "existing-credits", "job",
    "dependents", "telephone", "foreign-worker", "credit-risk",
]


def extract_from_wheel(dest: pathlib.Path) -> tuple[pathlib.Path, pathlib.Path]:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "responsibly==0.1.2",
             "--no-deps", "-d", tmp],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("responsibly-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            adult = dest / "adult.data"
            german = dest / "german.data"
            adult.write_bytes(zf.read("responsibly/dataset/adult/adult.data"))
            german.write_bytes(zf.read("responsibly/dataset/german/german.data"))
    return adult, german


def convert_adult(raw: pathlib.Path, out: pathlib.Path) -> int:
    rows = 0
    with raw.open() as src, out.open("w") as dst:
        dst.write(",".join(ADULT_COLUMNS) + "\n")
        for line in src:
            line = line.strip()
            if not line:
                continue
            cells = [c.strip() for c in line.split(",")]
            if len(cells) != len(ADULT_COLUMNS):
                continue
            dst.write(",".join(cells) + "\n")
            rows += 1
    return rows


def convert_german(raw: pathlib.Path, out: pathlib.Path) -> int:
    rows = 0
    with raw.open() as src, out.open("w") as dst:
        dst.write(",".join(GERMAN_COLUMNS) + "\n")
        for line in src:
            cells = line.split()
            if len(cells) != len(GERMAN_COLUMNS):
                continue
            dst.write(",".join(cells) + "\n")
            rows += 1
    return rows


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=pathlib.Path(__file__).resolve().parent.parent / "data",
                        type=pathlib.Path)
    parser.add_argument("--adult-raw", type=pathlib.Path)
    parser.add_argument("--german-raw", type=pathlib.Path)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    adult_raw, german_raw = args.adult_raw, args.german_raw
    if adult_raw is None or german_raw is None:
        with tempfile.TemporaryDirectory() as tmp:
            fetched_adult, fetched_german = extract_from_wheel(pathlib.Path(tmp))
            n_adult = convert_adult(adult_raw or fetched_adult, args.out / "adult.csv")
            n_german = convert_german(german_raw or fetched_german, args.out / "german.csv")
    else:
        n_adult = convert_adult(adult_raw, args.out / "adult.csv")
        n_german = convert_german(german_raw, args.out / "german.csv")

    print(f"adult.csv: {n_adult} rows, german.csv: {n_german} rows -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
