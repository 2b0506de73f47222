"""Workload language parsing and deterministic content generation."""

import pytest

from vboinc.errors import WorkloadParseError
from vboinc.workload import WorkloadProgram, fill_bytes


def test_parse_all_instructions():
    text = (
        "# warm up\n"
        "cpu 100\n"
        "alloc 4096\n"
        "free 1024\n"
        "\n"
        "write 1 8192\n"
        "emit result 256\n"
        "fail out of luck\n"
    )
    program = WorkloadProgram.parse(text)
    ops = [ins.op for ins in program]
    assert ops == ["cpu", "alloc", "free", "write", "emit", "fail"]
    assert program.instructions[0].ticks == 100
    assert program.instructions[3].disk_index == 1
    assert program.instructions[4].name == "result"
    assert program.instructions[4].nbytes == 256
    assert program.instructions[5].message == "out of luck"


@pytest.mark.parametrize("bad,line", [
    ("cpu x\n", 1),
    ("cpu -5\n", 1),
    ("cpu 1\nwrite 1\n", 2),
    ("emit onlyname\n", 1),
    ("fail\n", 1),
    ("spin 100\n", 1),
])
def test_parse_errors_carry_line_numbers(bad, line):
    with pytest.raises(WorkloadParseError) as err:
        WorkloadProgram.parse(bad)
    assert err.value.line_no == line


def test_step_count_respects_exec_cap():
    program = WorkloadProgram.parse("cpu 90\nemit x 5\n")
    assert program.step_count(100) == 90 + 1
    assert program.step_count(90) == 100 + 1  # ceil(9000 / 90)


def test_step_count_stops_at_fail():
    program = WorkloadProgram.parse("cpu 10\nfail nope\ncpu 100\n")
    assert program.step_count() == 11


def test_fill_bytes_deterministic_and_distinct():
    a = fill_bytes("tag", 1000)
    assert a == fill_bytes("tag", 1000)
    assert a != fill_bytes("other", 1000)
    assert fill_bytes("tag", 0) == b""
    assert len(fill_bytes("tag", 33)) == 33
    assert fill_bytes("tag", 33) == a[:33]


def test_render_round_trip():
    text = "cpu 5\nalloc 10\nwrite 0 20\nemit out 30\nfail whoops and more\n"
    program = WorkloadProgram.parse(text)
    rendered = "\n".join(ins.render() for ins in program) + "\n"
    assert WorkloadProgram.parse(rendered).instructions == program.instructions
