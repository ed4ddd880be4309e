from pathlib import Path

import pytest

from sero.corpus import VaccineCatalogEntry


@pytest.fixture
def test_catalog():
    return (
        VaccineCatalogEntry(1, "Janssen", 1, 0),
        VaccineCatalogEntry(2, "Pfizer", 2, 21),
        VaccineCatalogEntry(3, "Moderna", 2, 28),
    )


DEFAULT_FILES = {
    "countries.csv": """country,population,pop_density,gdp_pc,confirmed_file
AAA,1000000,10.5,1200.0,confirmed_AAA.csv
BBB,2000000,250.0,38000.0,confirmed_BBB.csv
""",
    "confirmed_AAA.csv": """date,confirmed
2021-01-01,0
2021-01-10,1000
2021-01-20,2000
2021-03-01,50000
""",
    "confirmed_BBB.csv": """date,confirmed
2021-01-01,100
2021-02-01,40000
""",
    "vaccination.csv": """country,date,cum_doses,cum_fully,vaccines_in_use,per_vaccine
AAA,2021-01-05,1000,,1|2,1=500;2=500
AAA,2021-01-15,3000,400,1|2,1=1500;2=1500
AAA,2021-02-14,9000,2000,1|2|3,1=3000;2=4000;3=2000
BBB,2021-01-20,5000,,2,
BBB,2021-02-19,20000,6000,2|3,
""",
    "delivery.csv": """country,vaccine,doses
AAA,1,100
AAA,2,300
""",
    "trials.csv": """manufacturer,dose,NV,nV,NC,nC
Pfizer,1,21669,39,21686,82
Pfizer,2,21669,11,21686,193
Moderna,1,996,7,1079,39
Moderna,2,13934,5,13883,90
Janssen,1,19630,116,19691,348
""",
    "surveys.csv": """country,end_date,N,X,sens_tp,sens_fn,spec_tn,spec_fp
AAA,2021-02-01,500,60,93,7,197,3
BBB,2021-03-01,800,100,0.95,,0.99,
""",
}


def write_corpus_files(directory, overrides=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = dict(DEFAULT_FILES)
    if overrides:
        files.update(overrides)
    for name, content in files.items():
        if content is not None:
            (directory / name).write_text(content)
    return directory


@pytest.fixture
def corpus_dir(tmp_path):
    return write_corpus_files(tmp_path / "corpus")
