"""Parser, printer, and substitution machinery."""

import pytest
from hypothesis import given, strategies as st

from conftest import EXAMPLES, GOOD_EXAMPLES

from locpar import syntax as S


class TestParsePrintRoundTrip:
    @pytest.mark.parametrize("name", GOOD_EXAMPLES)
    def test_example_round_trips(self, name):
        src = (EXAMPLES / name).read_text()
        prog = S.parse_program(src)
        reprinted = S.parse_program(S.print_program(prog))
        assert len(reprinted.fundecls) == len(prog.fundecls)
        for a, b in zip(prog.fundecls, reprinted.fundecls):
            assert S.alpha_equivalent(a, b)
        assert S.alpha_equivalent(prog.main, reprinted.main)

    def test_expr_round_trip(self):
        e = S.parse_expr("let x : Int = (1 + 2) in (x * x)")
        assert S.alpha_equivalent(e, S.parse_expr(S.print_expr(e)))

    @given(st.integers(min_value=-(2**40), max_value=2**40))
    def test_int_literals_round_trip(self, n):
        e = S.parse_expr(str(n))
        assert isinstance(e, S.IntLit) and e.value == n
        assert S.parse_expr(S.print_expr(e)) == e

    def test_syntax_error_raised(self):
        with pytest.raises(S.SyntaxErrorLC):
            S.parse_expr("let x = in")
        with pytest.raises(S.SyntaxErrorLC):
            S.parse_program("fun f ( : Int = 3")


class TestAlphaEquivalence:
    def test_renamed_binder_is_equivalent(self):
        a = S.parse_expr("let x : Int = 1 in (x + 2)")
        b = S.parse_expr("let y : Int = 1 in (y + 2)")
        assert S.alpha_equivalent(a, b)

    def test_different_body_not_equivalent(self):
        a = S.parse_expr("let x : Int = 1 in (x + 2)")
        b = S.parse_expr("let x : Int = 1 in (x + 3)")
        assert not S.alpha_equivalent(a, b)

    def test_free_variable_identity_matters(self):
        a = S.parse_expr("(x + 1)")
        b = S.parse_expr("(y + 1)")
        assert not S.alpha_equivalent(a, b)


class TestSubstitution:
    def test_var_substitution(self):
        e = S.parse_expr("(x + y)")
        out = S.substitute(e, var_map={"x": S.IntLit(5)})
        assert S.alpha_equivalent(out, S.parse_expr("(5 + y)"))

    def test_shadowing_binder_stops_substitution(self):
        e = S.parse_expr("let x : Int = 1 in (x + y)")
        out = S.substitute(e, var_map={"x": S.IntLit(9)})
        # the bound occurrence of x refers to the let binder, not the
        # substituted variable, so the body must be untouched
        assert S.alpha_equivalent(out, e)

    def test_freshen_is_alpha_equivalent(self):
        prog = S.parse_program((EXAMPLES / "constfold.lcp").read_text())
        fd = prog.fundecls[0]
        supply = S.NameSupply()
        fresh = S.freshen(fd, supply)
        assert S.alpha_equivalent(fd, fresh)
        assert fresh.body is not fd.body or fresh.body == fd.body

    def test_instantiate_matches_freshen_then_substitute(self):
        prog = S.parse_program((EXAMPLES / "constfold.lcp").read_text())
        fd = prog.fundecls[0]
        locargs = [("lc", "rc")] * len(fd.locparams)
        args = [S.IntLit(7)] * len(fd.params)

        fresh = S.freshen(fd, S.NameSupply())
        lm = {l: al for (l, _), (al, _) in zip(fresh.locparams, locargs)}
        rm = {r: ar for (_, r), (_, ar) in zip(fresh.locparams, locargs)}
        vm = {x: v for (x, _), v in zip(fresh.params, args)}
        slow = S.substitute(fresh.body, var_map=vm, loc_map=lm, reg_map=rm)

        fast = S.instantiate(fd, locargs, args, S.NameSupply())
        assert S.alpha_equivalent(slow, fast)


class TestNameSupply:
    def test_fresh_names_distinct(self):
        ns = S.NameSupply()
        seen = {ns.fresh("x") for _ in range(100)}
        assert len(seen) == 100

    def test_fresh_reuses_base(self):
        ns = S.NameSupply()
        n = ns.fresh("loc%3")
        assert n.split("%", 1)[0] == "loc"
