import json

import pytest
from hypothesis import given, strategies as st

from metaq.model import (
    ClientSpec,
    ProgramError,
    ProgramSemanticError,
    ProgramSyntaxError,
    average_clients,
    parse_program,
    render_program,
    substitute_params,
)

from support import make_program, program_doc


def test_parse_render_round_trip():
    p = make_program(lam=4.25, mu=7.5, tau=3.0, retries=2, queue_bound=12, orbit_bound=5)
    q = parse_program(render_program(p))
    assert q == p


def test_parse_requires_schema_version():
    doc = program_doc()
    del doc["version"]
    with pytest.raises(ProgramSyntaxError):
        parse_program(json.dumps(doc))


def test_parse_rejects_bad_json():
    with pytest.raises(ProgramSyntaxError):
        parse_program("{not json")


def test_duplicate_server_ids_rejected():
    doc = program_doc()
    doc["servers"].append(dict(doc["servers"][0]))
    with pytest.raises(ProgramSemanticError):
        parse_program(json.dumps(doc))


def test_downstream_must_be_next_in_pipeline():
    doc = program_doc()
    doc["servers"][0]["downstream"] = "s1"  # self-loop
    with pytest.raises(ProgramSemanticError):
        parse_program(json.dumps(doc))


@pytest.mark.parametrize(
    "field,value",
    [("mu", 0.0), ("mu", -1.0), ("queue_bound", 0), ("orbit_bound", -1), ("threads", 0)],
)
def test_server_field_validation(field, value):
    doc = program_doc()
    doc["servers"][0][field] = value
    with pytest.raises(ProgramSemanticError):
        parse_program(json.dumps(doc))


@pytest.mark.parametrize(
    "field,value", [("lambda", -1.0), ("timeout", 0.0), ("retries", -1)]
)
def test_client_field_validation(field, value):
    doc = program_doc()
    doc["clients"][0][field] = value
    with pytest.raises(ProgramSemanticError):
        parse_program(json.dumps(doc))


def test_multiple_clients_are_averaged_on_parse():
    doc = program_doc(lam=6.0, tau=2.0, retries=1)
    doc["clients"].append({"server": "s1", "lambda": 2.0, "timeout": 6.0, "retries": 3})
    p = parse_program(json.dumps(doc))
    assert len(p.clients) == 1
    c = p.clients[0]
    assert c.arrival_rate == pytest.approx(8.0)
    # rate-weighted: (6*2 + 2*6) / 8
    assert c.timeout == pytest.approx(3.0)
    # (6*1 + 2*3) / 8 = 1.5, ties round up
    assert c.max_retries == 2


def test_average_clients_rejects_mixed_targets():
    a = ClientSpec(server="s1", arrival_rate=1.0, timeout=1.0, max_retries=0)
    b = ClientSpec(server="s2", arrival_rate=1.0, timeout=1.0, max_retries=0)
    with pytest.raises(ProgramSemanticError):
        average_clients([a, b])


def test_average_clients_rejects_zero_total_rate():
    a = ClientSpec(server="s1", arrival_rate=0.0, timeout=1.0, max_retries=0)
    with pytest.raises(ProgramSemanticError):
        average_clients([a, a])


@given(
    rates=st.lists(st.floats(0.01, 100.0), min_size=2, max_size=6),
    timeouts=st.lists(st.floats(0.1, 50.0), min_size=6, max_size=6),
    retries=st.lists(st.integers(0, 5), min_size=6, max_size=6),
)
def test_average_clients_properties(rates, timeouts, retries):
    clients = [
        ClientSpec(server="s1", arrival_rate=r, timeout=t, max_retries=k)
        for r, t, k in zip(rates, timeouts, retries)
    ]
    merged = average_clients(clients)
    assert merged.arrival_rate == pytest.approx(sum(rates))
    ts = timeouts[: len(rates)]
    assert min(ts) * (1 - 1e-9) <= merged.timeout <= max(ts) * (1 + 1e-9)
    ks = retries[: len(rates)]
    assert min(ks) <= merged.max_retries <= max(ks)


def test_nominal_params_names_and_values():
    p = make_program(lam=9.5, mu=10.0, tau=9.0)
    theta = p.nominal_params()
    assert dict(theta.entries) == {"mu_1": 10.0, "lambda_1": 9.5, "timeout_1": 9.0}


def test_substitute_params_round_trip():
    p = make_program()
    q = substitute_params(p, {"lambda_1": 8.0, "mu_1": 11.0, "timeout_1": 4.5})
    assert q.clients[0].arrival_rate == 8.0
    assert q.servers[0].service_rate == 11.0
    assert q.clients[0].timeout == 4.5
    # original untouched
    assert p.clients[0].arrival_rate == 9.5


def test_substitute_params_rejects_unknown_names():
    p = make_program()
    with pytest.raises(ProgramError):
        substitute_params(p, {"retries_1": 5})
    with pytest.raises(ProgramError):
        substitute_params(p, {"lambda_2": 1.0})


def test_substitute_params_needs_a_client_for_client_params():
    doc = program_doc()
    doc["clients"] = []
    p = parse_program(json.dumps(doc))
    with pytest.raises(ProgramError):
        substitute_params(p, {"timeout_1": 3.0})


def test_param_vector_box_enforced():
    from metaq.model import ParamVector

    with pytest.raises(ProgramSemanticError):
        ParamVector({"lambda_1": 12.0}, box={"lambda_1": (9.0, 10.0)})
