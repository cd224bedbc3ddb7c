"""Seeded random model generator for parse/print round-trip tests."""

from __future__ import annotations

import math
import random

from adnopt.modelir import (
    COMPONENTS,
    Expr,
    LinearCon,
    Model,
    QuadCon,
    SocCon,
    Var,
)


def _coef(rng: random.Random) -> float:
    pick = rng.random()
    if pick < 0.3:
        return float(rng.randint(-9, 9) or 1)
    if pick < 0.6:
        return round(rng.uniform(-5, 5), 4) or 1.0
    # exercise scientific notation and long reprs
    return rng.uniform(-1, 1) * 10.0 ** rng.randint(-8, 6) or 1e-3


def _affine(rng: random.Random, names: list[str], max_terms: int = 4) -> Expr:
    e = Expr()
    for name in rng.sample(names, rng.randint(1, min(max_terms, len(names)))):
        e.add(name, _coef(rng))
    if rng.random() < 0.4:
        e.add_const(_coef(rng))
    return e


def random_model(seed: int) -> Model:
    rng = random.Random(seed)
    T = rng.randint(1, 4)
    model = Model(f"rt_{seed}", T, rng.choice([1.0, 0.5, 0.25]))

    names = []
    for i in range(rng.randint(3, 10)):
        name = f"x{i}"
        if rng.random() < 0.2:
            var = Var(name, "bin", 0.0, 1.0, tag=rng.choice([None, "equipment"]))
        else:
            lo = rng.choice([-math.inf, 0.0, round(rng.uniform(-3, 0), 3)])
            hi = rng.choice([math.inf, 1.0, round(rng.uniform(0.5, 4), 3)])
            tag = rng.choice([None, None, "equipment", "power_flow"])
            var = Var(name, "cont", lo, hi, tag=tag)
        model.add_var(var)
        names.append(name)

    for k in range(rng.randint(1, 8)):
        tag = rng.choice(COMPONENTS)
        shape = rng.random()
        if shape < 0.5:
            rel = rng.choice(["<=", "=", ">="])
            model.add_con(LinearCon(f"row.lin.{k}", tag, _affine(rng, names), rel, _coef(rng)))
        elif shape < 0.75:
            lhs = Expr()
            for name in rng.sample(names, rng.randint(1, 2)):
                lhs.add_quad(name, name, abs(_coef(rng)))
            if rng.random() < 0.5:
                lhs.add(rng.choice(names), _coef(rng))
            model.add_con(QuadCon(f"row.quad.{k}", tag, lhs, _affine(rng, names)))
        else:
            vec = [_affine(rng, names, 2) for _ in range(rng.randint(1, 3))]
            model.add_con(SocCon(f"row.soc.{k}", tag, vec, _affine(rng, names, 2)))

    model.objective = _affine(rng, names)
    return model
