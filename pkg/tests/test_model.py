"""Model schema parsing, validation, and hashing."""
import copy
import json

import numpy as np
import pytest
from importlib import resources

from locoplan import (SchemaError, ValidationError, builtin_model, builtin_models,
                      model_hash, parse_model)
from locoplan.model import model_to_dict


def miniquad_doc():
    ref = resources.files("locoplan.data.models").joinpath("miniquad.json")
    return json.loads(ref.read_text())


def test_builtin_models_load():
    models = builtin_models()
    assert set(models) == {"pendulum", "miniquad", "fullquad"}
    mq = models["miniquad"]
    assert mq.n_j == 11 and mq.n_q == 17 and mq.n_v == 17
    assert len(mq.contacts) == 4
    assert mq.contact_names() == ["lf_foot", "rf_foot", "lh_foot", "rh_foot"]


def test_joint_ordering_topological():
    m = builtin_model("miniquad")
    assert m.joints[0].kind == "floating"
    seen = {m.joints[0].child}
    for j in m.joints[1:]:
        assert j.parent in seen
        seen.add(j.child)


def test_bounds_shapes_and_defaults():
    m = builtin_model("miniquad")
    qb, vb, tb = m.q_bounds(), m.v_bounds(), m.tau_bounds()
    assert qb.shape == (m.n_q, 2) and vb.shape == (m.n_v, 2)
    assert tb.shape == (m.n_j, 2)
    assert np.all(tb[:, 0] < tb[:, 1])
    assert np.all(np.isfinite(tb))


def test_total_mass_positive():
    m = builtin_model("miniquad")
    assert m.total_mass() == pytest.approx(12.4, abs=1e-9)


def test_parse_round_trip():
    doc = miniquad_doc()
    m1 = parse_model(doc)
    m2 = parse_model(model_to_dict(m1))
    assert model_hash(m1) == model_hash(m2)


def test_hash_stable_and_sensitive():
    h1 = model_hash(parse_model(miniquad_doc()))
    h2 = model_hash(builtin_model("miniquad"))
    assert h1 == h2
    doc = miniquad_doc()
    doc["links"][0]["mass"] += 1e-6
    assert model_hash(parse_model(doc)) != h1


def _expect(doc, err):
    with pytest.raises(err):
        parse_model(doc)


def test_missing_top_level_field():
    doc = miniquad_doc()
    del doc["joints"]
    _expect(doc, SchemaError)


def test_bad_schema_version():
    doc = miniquad_doc()
    doc["schema"] = 99
    _expect(doc, SchemaError)


def test_negative_mass_rejected():
    doc = miniquad_doc()
    doc["links"][0]["mass"] = -1.0
    _expect(doc, ValidationError)


def test_indefinite_inertia_rejected():
    doc = miniquad_doc()
    doc["links"][0]["inertia"] = [-1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
    _expect(doc, ValidationError)


def test_unknown_parent_link_rejected():
    doc = miniquad_doc()
    doc["joints"][1]["parent"] = "nope"
    _expect(doc, ValidationError)


def test_duplicate_joint_names_rejected():
    doc = miniquad_doc()
    doc["joints"][2]["name"] = doc["joints"][1]["name"]
    _expect(doc, ValidationError)


def test_missing_torque_limits_rejected():
    doc = miniquad_doc()
    del doc["joints"][1]["limits"]["tau"]
    _expect(doc, ValidationError)


def test_two_floating_joints_rejected():
    doc = miniquad_doc()
    extra = copy.deepcopy(doc["joints"][0])
    extra["name"] = "float2"
    doc["joints"].append(extra)
    _expect(doc, ValidationError)


def test_contact_on_unknown_link_rejected():
    doc = miniquad_doc()
    doc["contacts"][0]["link"] = "nope"
    _expect(doc, ValidationError)


def test_nonpositive_friction_rejected():
    doc = miniquad_doc()
    doc["contacts"][0]["mu"] = 0.0
    _expect(doc, ValidationError)


def test_zero_axis_rejected():
    doc = miniquad_doc()
    doc["joints"][1]["axis"] = [0.0, 0.0, 0.0]
    _expect(doc, (SchemaError, ValidationError))


def test_contact_normals_unit_with_tangent_basis():
    m = builtin_model("miniquad")
    for c in m.contacts:
        assert abs(np.linalg.norm(c.normal) - 1.0) < 1e-12
        T = np.stack([c.tangent, c.bitangent, c.normal])
        assert np.abs(T @ T.T - np.eye(3)).max() < 1e-12
