"""Tests for discretization, the selective scan and the Mamba blocks."""

import math

import pytest
import torch

from ssmvdm import NonFiniteError, Rng, ShapeError, ValidationError
from ssmvdm.gradcheck import check_gradients
from ssmvdm.numerics import precision
from ssmvdm.ssm import (
    BidirectionalMamba,
    MambaBlock,
    SelectiveInputs,
    SsmCoreParams,
    selective_scan_par,
    selective_scan_seq,
    zoh_discretize,
)


def _randomize_output(block, seed: int = 99) -> None:
    with torch.no_grad():
        weight = block.out_proj.weight
        weight.copy_(Rng(seed).gaussian(tuple(weight.shape), dtype=weight.dtype) * 0.5)


def _random_scan_problem(rng: Rng, G: int, L: int, D: int, N: int, dtype=torch.float64):
    params = SsmCoreParams(
        A=-rng.child("A").uniform((D, N), low=0.5, high=2.0, dtype=dtype),
        D_skip=rng.child("D").gaussian((D,), dtype=dtype),
        delta_bias=torch.zeros(D, dtype=dtype),
    )
    inputs = SelectiveInputs(
        u=rng.child("u").gaussian((G, L, D), dtype=dtype),
        B_sel=rng.child("B").gaussian((G, L, N), dtype=dtype),
        C_sel=rng.child("C").gaussian((G, L, N), dtype=dtype),
        delta=rng.child("delta").uniform((G, L, D), low=0.01, high=0.5, dtype=dtype),
    )
    return params, inputs


class TestDiscretization:
    def test_exact_hold_oracle(self):
        A = torch.tensor([[-1.0]], dtype=torch.float64)
        B = torch.ones(1, 1, 1, dtype=torch.float64)
        delta = torch.full((1, 1, 1), math.log(2.0), dtype=torch.float64)
        A_bar, B_bar = zoh_discretize(A, B, delta, exact=True)
        assert A_bar.item() == pytest.approx(0.5)
        assert B_bar.item() == pytest.approx(0.5)

    def test_euler_input_oracle(self):
        A = torch.tensor([[-2.0]], dtype=torch.float64)
        B = torch.full((1, 1, 1), 3.0, dtype=torch.float64)
        delta = torch.full((1, 1, 1), 0.5, dtype=torch.float64)
        A_bar, B_bar = zoh_discretize(A, B, delta)
        assert A_bar.item() == pytest.approx(math.exp(-1.0))
        assert B_bar.item() == pytest.approx(1.5)

    def test_output_shapes(self):
        A_bar, B_bar = zoh_discretize(-torch.ones(3, 4), torch.ones(2, 5, 4), torch.full((2, 5, 3), 0.1))
        assert A_bar.shape == (2, 5, 3, 4)
        assert B_bar.shape == (2, 5, 3, 4)
        assert bool(((A_bar > 0) & (A_bar < 1)).all())

    def test_non_positive_step_rejected(self):
        with pytest.raises(ValidationError):
            zoh_discretize(-torch.ones(1, 1), torch.ones(1, 1, 1), torch.zeros(1, 1, 1))

    def test_non_negative_state_rejected(self):
        with pytest.raises(ValidationError):
            zoh_discretize(torch.zeros(1, 1), torch.ones(1, 1, 1), torch.ones(1, 1, 1))

    @pytest.mark.parametrize("field", ["A", "B_sel", "delta"])
    def test_non_finite_rejected(self, field):
        args = {"A": -torch.ones(1, 2), "B_sel": torch.ones(1, 3, 2), "delta": torch.full((1, 3, 1), 0.1)}
        args[field].view(-1)[0] = float("nan")
        with pytest.raises(NonFiniteError):
            zoh_discretize(args["A"], args["B_sel"], args["delta"])


class TestSelectiveScan:
    def test_two_step_recurrence(self):
        params = SsmCoreParams(
            A=torch.tensor([[-1.0]], dtype=torch.float64),
            D_skip=torch.zeros(1, dtype=torch.float64),
            delta_bias=torch.zeros(1, dtype=torch.float64),
        )
        inputs = SelectiveInputs(
            u=torch.ones(1, 2, 1, dtype=torch.float64),
            B_sel=torch.ones(1, 2, 1, dtype=torch.float64),
            C_sel=torch.ones(1, 2, 1, dtype=torch.float64),
            delta=torch.full((1, 2, 1), math.log(2.0), dtype=torch.float64),
        )
        ln2 = math.log(2.0)
        for scan in (selective_scan_seq, selective_scan_par):
            assert scan(params, inputs).flatten().tolist() == pytest.approx([ln2, 1.5 * ln2])

    def test_single_step_includes_skip(self):
        params, inputs = _random_scan_problem(Rng(0), 2, 1, 3, 4)
        expected = (
            (inputs.delta.unsqueeze(-1) * inputs.B_sel.unsqueeze(2) * inputs.u.unsqueeze(-1))
            * inputs.C_sel.unsqueeze(2)
        ).sum(-1) + inputs.u * params.D_skip
        assert torch.allclose(selective_scan_par(params, inputs), expected, atol=1e-12)

    @pytest.mark.parametrize("exact", [False, True])
    @pytest.mark.parametrize("L", [1, 2, 5, 16, 33])
    def test_parallel_matches_sequential(self, L, exact):
        params, inputs = _random_scan_problem(Rng(L), 2, L, 3, 4)
        par = selective_scan_par(params, inputs, exact=exact)
        seq = selective_scan_seq(params, inputs, exact=exact)
        assert torch.allclose(par, seq, rtol=1e-10, atol=1e-12)

    def test_states_returned(self):
        params, inputs = _random_scan_problem(Rng(4), 2, 6, 3, 4)
        y, states = selective_scan_par(params, inputs, return_states=True)
        assert y.shape == (2, 6, 3)
        assert states.shape == (2, 6, 3, 4)

    def test_core_param_validation(self):
        with pytest.raises(ValidationError):
            SsmCoreParams(A=torch.ones(2, 3), D_skip=torch.ones(2), delta_bias=torch.zeros(2))
        with pytest.raises(ShapeError):
            SsmCoreParams(A=-torch.ones(2, 3), D_skip=torch.ones(3), delta_bias=torch.zeros(2))

    def test_input_validation(self):
        params, inputs = _random_scan_problem(Rng(0), 1, 4, 3, 4)
        with pytest.raises(ValidationError):
            SelectiveInputs(u=inputs.u, B_sel=inputs.B_sel, C_sel=inputs.C_sel, delta=-inputs.delta)
        with pytest.raises(ShapeError):
            SelectiveInputs(u=inputs.u, B_sel=inputs.B_sel, C_sel=inputs.C_sel[:, :, :2], delta=inputs.delta)
        other, _ = _random_scan_problem(Rng(1), 1, 4, 5, 4)
        with pytest.raises(ShapeError):
            selective_scan_par(other, inputs)

    @pytest.mark.parametrize("field", ["u", "B_sel", "C_sel", "delta"])
    @pytest.mark.parametrize("scan", [selective_scan_seq, selective_scan_par])
    def test_non_finite_input_rejected(self, field, scan):
        params, inputs = _random_scan_problem(Rng(0), 1, 4, 3, 4)
        fields = {name: getattr(inputs, name).clone() for name in ("u", "B_sel", "C_sel", "delta")}
        fields[field][0, 2, 1] = float("nan")
        with pytest.raises(NonFiniteError):
            scan(params, SelectiveInputs(**fields))

    def test_non_finite_skip_rejected(self):
        with pytest.raises(NonFiniteError):
            SsmCoreParams(A=-torch.ones(2, 3), D_skip=torch.tensor([1.0, float("inf")]), delta_bias=torch.zeros(2))

    def test_half_decay_oracle(self):
        # Δ = 1 and A = −ln 2 give Ā = 0.5; B = 2 ln 2 makes the exact-hold B̄ = 1
        ln2 = math.log(2.0)
        params = SsmCoreParams(
            A=torch.tensor([[-ln2]], dtype=torch.float64),
            D_skip=torch.zeros(1, dtype=torch.float64),
            delta_bias=torch.zeros(1, dtype=torch.float64),
        )
        inputs = SelectiveInputs(
            u=torch.ones(1, 2, 1, dtype=torch.float64),
            B_sel=torch.full((1, 2, 1), 2 * ln2, dtype=torch.float64),
            C_sel=torch.ones(1, 2, 1, dtype=torch.float64),
            delta=torch.ones(1, 2, 1, dtype=torch.float64),
        )
        A_bar, B_bar = zoh_discretize(params.A, inputs.B_sel, inputs.delta, exact=True)
        assert A_bar.flatten().tolist() == pytest.approx([0.5, 0.5])
        assert B_bar.flatten().tolist() == pytest.approx([1.0, 1.0])
        for scan in (selective_scan_seq, selective_scan_par):
            assert scan(params, inputs, exact=True).flatten().tolist() == pytest.approx([1.0, 1.5])

    def test_half_decay_gradients(self):
        ln2 = math.log(2.0)
        zero = torch.zeros(1, dtype=torch.float64)

        def loss(v):
            params = SsmCoreParams(A=v["A"], D_skip=zero, delta_bias=zero)
            step = torch.ones(1, 2, 1, dtype=torch.float64)
            inputs = SelectiveInputs(u=v["u"], B_sel=v["B_sel"], C_sel=v["C_sel"], delta=step)
            return selective_scan_par(params, inputs, exact=True).sum()

        result = check_gradients(
            "half_decay",
            loss,
            {
                "A": torch.tensor([[-ln2]], dtype=torch.float64),
                "u": torch.ones(1, 2, 1, dtype=torch.float64),
                "B_sel": torch.full((1, 2, 1), 2 * ln2, dtype=torch.float64),
                "C_sel": torch.ones(1, 2, 1, dtype=torch.float64),
            },
        )
        assert result.passed, result

    @pytest.mark.parametrize("seed", range(5))
    def test_states_stay_within_input_bound(self, seed):
        params, inputs = _random_scan_problem(Rng(seed), 2, 64, 3, 4)
        _, states = selective_scan_par(params, inputs, return_states=True)
        A_bar, B_bar = zoh_discretize(params.A, inputs.B_sel, inputs.delta)
        drive = (B_bar * inputs.u.unsqueeze(-1)).abs().max().item()
        bound = drive / (1.0 - A_bar.max().item())
        assert states.abs().max().item() <= bound * (1 + 1e-12)


class TestMambaBlock:
    def test_fresh_block_is_identity(self):
        block = MambaBlock(8, rng=Rng(0))
        X = Rng(1).gaussian((3, 6, 8))
        assert torch.equal(block(X), X)

    def test_shape_preserved(self):
        block = MambaBlock(8, rng=Rng(0))
        _randomize_output(block)
        assert block(Rng(1).gaussian((3, 6, 8))).shape == (3, 6, 8)

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            MambaBlock(8, rng=Rng(0))(torch.zeros(2, 4, 6))

    def test_single_frame(self):
        block = MambaBlock(8, rng=Rng(0))
        _randomize_output(block)
        assert torch.isfinite(block(Rng(1).gaussian((2, 1, 8)))).all()

    def test_deterministic_init(self):
        a = MambaBlock(8, rng=Rng(5))
        b = MambaBlock(8, rng=Rng(5))
        for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), name

    @pytest.mark.parametrize("seed", range(100))
    def test_forward_block_is_causal(self, seed):
        rng = Rng(seed)
        t = int(rng.child("t").integers(1, 8, 1)[0])
        with precision("float64"):
            block = MambaBlock(8, direction="forward", rng=rng.child("block"))
            _randomize_output(block, seed)
            X = rng.child("x").gaussian((2, 10, 8))
            Y = block(X)
            X2 = X.clone()
            X2[:, t] += rng.child("bump").gaussian((2, 8))
            Y2 = block(X2)
        assert torch.allclose(Y[:, :t], Y2[:, :t], atol=1e-12)
        assert not torch.allclose(Y[:, t:], Y2[:, t:])

    @pytest.mark.parametrize("seed", range(100))
    def test_backward_block_is_anticausal(self, seed):
        rng = Rng(seed)
        t = int(rng.child("t").integers(1, 8, 1)[0])
        with precision("float64"):
            block = MambaBlock(8, direction="backward", rng=rng.child("block"))
            _randomize_output(block, seed)
            X = rng.child("x").gaussian((2, 10, 8))
            Y = block(X)
            X2 = X.clone()
            X2[:, t] += rng.child("bump").gaussian((2, 8))
            Y2 = block(X2)
        assert torch.allclose(Y[:, t + 1 :], Y2[:, t + 1 :], atol=1e-12)
        assert not torch.allclose(Y[:, : t + 1], Y2[:, : t + 1])

    def test_direction_override_matches_flipped_input(self):
        with precision("float64"):
            block = MambaBlock(8, rng=Rng(0))
            _randomize_output(block)
            X = Rng(1).gaussian((2, 7, 8))
            backward = block(X, "backward")
            flipped = block(X.flip(1)).flip(1)
        assert torch.allclose(backward, flipped, atol=1e-12)

    def test_exact_hold_variant_runs(self):
        block = MambaBlock(8, exact_zoh=True, rng=Rng(0))
        _randomize_output(block)
        assert block(Rng(1).gaussian((1, 5, 8))).shape == (1, 5, 8)


class TestBidirectionalMamba:
    def test_fresh_block_is_identity(self):
        block = BidirectionalMamba(8, rng=Rng(0))
        X = Rng(1).gaussian((2, 5, 8))
        assert torch.equal(block(X), X)

    def test_first_frame_sees_last_frame(self):
        with precision("float64"):
            block = BidirectionalMamba(8, rng=Rng(0))
            _randomize_output(block)
            X = Rng(1).gaussian((2, 8, 8))
            X2 = X.clone()
            X2[:, -1] += Rng(2).gaussian((2, 8))
            delta = (block(X2)[:, 0] - block(X)[:, 0]).abs().max().item()
        assert delta > 1e-6

    def test_tied_block_commutes_with_reversal(self):
        with precision("float64"):
            block = BidirectionalMamba(8, rng=Rng(0)).tie_directions_()
            _randomize_output(block)
            X = Rng(1).gaussian((3, 9, 8))
            assert torch.allclose(block(X.flip(1)), block(X).flip(1), atol=1e-10)

    def test_untied_branches_differ(self):
        block = BidirectionalMamba(8, rng=Rng(0))
        fwd = dict(block.forward_branch.named_parameters())
        bwd = dict(block.backward_branch.named_parameters())
        assert not torch.equal(fwd["x_proj.weight"], bwd["x_proj.weight"])

    def test_wrong_rank(self):
        with pytest.raises(ShapeError):
            BidirectionalMamba(8, rng=Rng(0))(torch.zeros(2, 8))
