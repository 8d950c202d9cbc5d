import os

import pytest

from fedkgc.kg import KnowledgeGraph, Triple


def write_kg_dir(path, entities, relations, train, valid=(), test=()):
    os.makedirs(path, exist_ok=True)

    def write(name, rows):
        with open(os.path.join(path, name), "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write("\t".join(str(x) for x in row) + "\n")

    write("entities.tsv", enumerate(entities))
    write("relations.tsv", enumerate(relations))
    write("train.tsv", train)
    write("valid.tsv", valid)
    write("test.tsv", test)
    return str(path)


@pytest.fixture
def toy_dir(tmp_path):
    return write_kg_dir(tmp_path / "toy", ["london", "paris", "rome"], ["capital of"],
                        [(0, 0, 1), (1, 0, 2)])


@pytest.fixture
def path_graph():
    # a - b - c - d
    return KnowledgeGraph("path", ["a", "b", "c", "d"], ["next"],
                          {"train": [Triple(0, 0, 1), Triple(1, 0, 2), Triple(2, 0, 3)]})


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
