import pytest
from hypothesis import given
from hypothesis import strategies as st

from teamwire import utils
from teamwire.utils import NotYourTurn
from teamwire.utils import TeamwireError
from teamwire.utils import ValidationFailed
from teamwire.utils import abstract_of
from teamwire.utils import error_from_code
from teamwire.utils import is_uuid
from teamwire.utils import new_id
from teamwire.utils import normalize_ids
from teamwire.utils import tokenize


class TestErrors:

    def test_code_is_class_name(self):
        assert NotYourTurn("x").code == "NotYourTurn"
        assert TeamwireError().code == "TeamwireError"

    def test_keyerror_subclass_str(self):
        err = utils.UnknownGroup("no such comm_id: g1")
        assert str(err) == "no such comm_id: g1"
        assert isinstance(err, KeyError)

    @pytest.mark.parametrize(
        "code",
        ["AuthFailed", "UnknownGroup", "NotYourTurn", "StaleSeq", "DepthExceeded"],
    )
    def test_error_from_code(self, code):
        err = error_from_code(code, "detail")
        assert type(err).__name__ == code
        assert err.detail == "detail"

    def test_error_from_code_nested_subclass(self):
        assert type(error_from_code("TurnBudgetExhausted")) is utils.TurnBudgetExhausted
        assert type(error_from_code("UnknownTask")) is utils.UnknownTask

    def test_error_from_code_unknown(self):
        err = error_from_code("SomethingNew", "later version")
        assert type(err) is TeamwireError
        assert str(err) == "later version"

    def test_validation_failed(self):
        err = ValidationFailed(["a", "b"])
        assert err.violations == ["a", "b"]
        assert str(err) == "a; b"
        assert ValidationFailed("single").violations == ["single"]
        assert error_from_code("ValidationFailed", "c").violations == ["c"]

    def test_builtin_bases(self):
        assert issubclass(utils.ServerUnreachable, ConnectionError)
        assert issubclass(utils.TaskTimeout, TimeoutError)
        assert issubclass(utils.ExpectationFailed, AssertionError)
        assert issubclass(utils.TurnBudgetExhausted, utils.IllegalTransition)


class TestTokenize:

    def test_basic(self):
        assert tokenize("Personal-finance & BUDGETING") == [
            "personal",
            "finance",
            "budgeting",
        ]

    def test_empty(self):
        assert tokenize("") == []
        assert tokenize(" -- !! ") == []

    @given(st.text())
    def test_tokens_are_lower_alnum(self, text):
        for tok in tokenize(text):
            assert tok
            assert all(c in "0123456789abcdefghijklmnopqrstuvwxyz" for c in tok)


class TestIds:

    def test_new_id_is_uuid(self):
        a, b = new_id(), new_id()
        assert is_uuid(a) and is_uuid(b)
        assert a != b

    def test_is_uuid_rejects(self):
        assert not is_uuid("g1")
        assert not is_uuid(None)
        assert not is_uuid(new_id() + "x")

    def test_normalize_ids_consistent(self):
        a, b = new_id(), new_id()
        lines = [f'{{"comm_id":"{a}"}}', f"{b} then {a}"]
        assert normalize_ids(lines) == [
            '{"comm_id":"<id-1>"}',
            "<id-2> then <id-1>",
        ]

    def test_normalize_ids_two_runs_equal(self):
        def run():
            a, b = new_id(), new_id()
            return [f"{a}:{b}", f"{b}"]

        assert normalize_ids(run()) == normalize_ids(run())

    def test_normalize_ids_leaves_other_text(self):
        assert normalize_ids(["no ids here"]) == ["no ids here"]


class TestAbstract:

    def test_folds_whitespace(self):
        assert abstract_of("a\n\n b\t c") == "a b c"

    @given(st.text(), st.integers(min_value=0, max_value=300))
    def test_limit(self, text, limit):
        out = abstract_of(text, limit=limit)
        assert len(out) <= limit
        assert "\n" not in out
