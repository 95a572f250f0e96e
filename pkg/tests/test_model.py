import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clssem.model import (ConstraintDecl, DataError, Dataset, IdentificationWarning,
                          ModelError, free_unknowns, load_model, parse_csv, parse_model,
                          print_model, read_csv, scale_anchors)
from clssem.simgen import get_study


def test_ganzach_model_shape():
    model = get_study("ganzach").model()
    assert (model.m, model.Q, model.k) == (10, 3, 9)


def test_minimal_model():
    model = parse_model("latent: Z\nmanifest: x1\neq e: x1 = Z\n")
    assert model.m == 1
    assert model.latent_counts == (1,)


def test_democracy_model_shape():
    model = get_study("democracy").model()
    assert (model.m, model.Q, model.k) == (13, 3, 11)
    counts = dict(zip((eq.label for eq in model.equations), model.latent_counts))
    structural = sorted(c for c in counts.values() if c > 1)
    assert structural == [2, 3]


def test_fixed_parameters_leave_free_vector(regression_model):
    model = parse_model("""
        latent: Z
        manifest: x1, x2
        param: l1 = 1, l2
        eq a: x1 = l1*Z
        eq b: x2 = l2*Z
    """)
    assert model.free_params == ("l2",)
    assert model.fixed == {"l1": 1.0}


def test_comments_and_blank_lines():
    text = "# header\nlatent: Z  # trailing\n\nmanifest: x\neq e: x = Z\n"
    assert parse_model(text).m == 1


@pytest.mark.parametrize("text, line", [
    ("latent: Z\nmanifest: x\neq e: x = Z + q\n", 3),             # undeclared
    ("latent: Z\nmanifest: x\neq e: x = Z\neq e: x = 2*Z\n", 4),  # duplicate label
    ("latent: Z\nmanifest: x\neq e: x = Z\nconstraint center(Z\n", 4),
    ("latent: Z\nmanifest: x\neq e: x = Z\nconstraint bogus(Z)\n", 4),
    ("latent: Z\nmanifest: x\neq e: x == Z\n", 3),
])
def test_errors_name_the_line(text, line):
    with pytest.raises(ModelError) as info:
        parse_model(text, source="m.txt")
    assert info.value.line == line
    assert f"m.txt:{line}:" in str(info.value)


def test_latent_without_equation():
    with pytest.raises(ModelError, match="appears in no equation"):
        parse_model("latent: Z, W\nmanifest: x\neq e: x = Z\n")


@pytest.mark.parametrize("decl", ["constraint center(Q)", "constraint zerocov(e, f)",
                                  "constraint zerocov(e) hard", "constraint zerolatcov(Z, f)"])
def test_constraint_references_checked(decl):
    with pytest.raises(ModelError):
        parse_model(f"latent: Z\nmanifest: x\neq e: x = Z\n{decl}\n")


def test_constraint_modes():
    model = parse_model("latent: Z\nmanifest: x, y\nparam: a\neq e: x = a*Z\neq f: y = Z\n"
                        "constraint center(Z)\nconstraint normalize(Z) hard\n"
                        "constraint zerocov(e, f)\nconstraint zerolatcov(Z, e)\n")
    assert model.constraints[0] == ConstraintDecl("center", ("Z",), "soft")
    assert model.constraints[1].mode == "hard"
    assert [c.kind for c in model.constraints] == ["center", "normalize", "zerocov",
                                                   "zerolatcov"]


def test_unscaled_latent_warns():
    with pytest.warns(IdentificationWarning):
        parse_model("latent: Z\nmanifest: x, y\nparam: a, b\neq e: x = a*Z\neq f: y = b*Z\n")


def test_normalize_silences_scale_warning(recwarn):
    parse_model("latent: Z\nmanifest: x, y\nparam: a, b\neq e: x = a*Z\neq f: y = b*Z\n"
                "constraint normalize(Z)\n")
    assert not [w for w in recwarn if issubclass(w.category, IdentificationWarning)]


def test_scale_anchor_found(regression_model):
    assert scale_anchors(regression_model) == {"Z": 0}


# -- unknown layout --------------------------------------------------------

def test_layout_lengths(regression_model):
    assert free_unknowns(regression_model, 100).size == 101
    model = get_study("ganzach").model()
    assert free_unknowns(model, 100).size == model.S + 3 * 100


@pytest.mark.filterwarnings("ignore::clssem.model.IdentificationWarning")
def test_layout_arithmetic():
    text = ("latent: A, B, C\nmanifest: x\nparam: " + ", ".join(f"p{i}" for i in range(8))
            + "\neq e: x = p0*A + p1*B + p2*C + p3 + p4 + p5 + p6 + p7\n")
    model = parse_model(text)
    assert free_unknowns(model, 100).size == 308


def test_layout_is_case_major():
    model = get_study("democracy").model()
    lay = free_unknowns(model, 4)
    u = np.arange(lay.size, dtype=float)
    p, Z = lay.split(u)
    assert p.size == model.S
    assert Z[1, 2] == u[model.S + 1 * 3 + 2]
    np.testing.assert_array_equal(lay.join(p, Z), u)
    assert lay.names()[model.S + 3] == f"{model.latent[0]}[1]"


# -- round trip ------------------------------------------------------------

@pytest.mark.parametrize("tag", ["regression", "democracy", "ganzach", "muthen",
                                 "exponential", "implicative"])
def test_print_parse_round_trip(tag):
    model = get_study(tag).model()
    assert parse_model(print_model(model)) == model


def test_round_trip_with_constraints_and_fixed_values():
    model = parse_model("latent: Z\nmanifest: x, y\nparam: a = 0.25, b\n"
                        "eq e: x = a*Z - b\neq f: y = Z^2/(1 + Z^2)\n"
                        "constraint center(Z) hard\nconstraint zerocov(e, f)\n")
    assert parse_model(print_model(model)) == model


@given(st.permutations(list(range(6))))
def test_latent_counts_invariant_under_case_relabeling(perm):
    # L_l depends on the equations only; relabeling cases leaves it unchanged
    model = get_study("muthen").model()
    data, _ = get_study("muthen").generate(6, 0)
    permuted = data.take(np.asarray(perm))
    assert model.latent_counts == parse_model(print_model(model)).latent_counts
    assert permuted.n == data.n


def test_load_model_from_file(tmp_path, regression_model):
    path = tmp_path / "m.txt"
    path.write_text(print_model(regression_model))
    assert load_model(path) == regression_model


# -- datasets --------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    data = Dataset.from_mapping({"x": [1.0, 2.5], "y": [-0.125, 1e-17]})
    path = tmp_path / "d.csv"
    data.to_csv(path)
    back = read_csv(path)
    assert back.columns == ("x", "y")
    np.testing.assert_array_equal(back.values, data.values)


@pytest.mark.parametrize("text, fragment", [
    ("x,y\n1,2\n3\n", "<data>:3"),
    ("x,y\n1,abc\n", "<data>:2"),
    ("x,y\n1,nan\n", "non-finite"),
    ("x,y\n", "no data rows"),
    ("", "empty"),
    ("x,x\n1,2\n", "duplicate"),
])
def test_csv_errors(text, fragment):
    with pytest.raises(DataError, match=fragment):
        parse_csv(text)


def test_missing_manifest_column(regression_model):
    data = Dataset.from_mapping({"x": [1.0]})
    with pytest.raises(DataError, match="y"):
        data.columns_for(regression_model)


def test_dataset_is_read_only():
    data = Dataset.from_mapping({"x": [1.0, 2.0]})
    with pytest.raises(ValueError):
        data.values[0, 0] = 5.0
