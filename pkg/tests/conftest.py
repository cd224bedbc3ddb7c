import json

import pytest

from adnopt.cases import load_case
from adnopt.pipeline import asset_text, bundled_catalog
from adnopt.requirements import (
    ExtraConstraint,
    HorizonKind,
    StructuredRequirements,
)


def bundled_doc(name: str) -> dict:
    return json.loads(asset_text(f"cases/{name}.json"))


def case_variant(name: str, kinds: tuple[str, ...] | None = None):
    """Bundled case with its device list filtered to the given kinds.

    kinds=None keeps everything; kinds=() strips all devices, which is what
    the sweep-equality tests need (the no-equipment model and the passive
    sweep then share injections).
    """
    doc = bundled_doc(name)
    if kinds is not None:
        doc["devices"] = [d for d in doc["devices"] if d["kind"] in kinds]
    return load_case(json.dumps(doc))


def make_reqs(district="campus", objective="min_loss", equipment=(), constraints=(),
              t_hat=None):
    if t_hat is None:
        horizon = HorizonKind.day_ahead()
    else:
        horizon = HorizonKind.single_timestep(t_hat)
    extras = tuple(ExtraConstraint(kind) for kind in constraints)
    return StructuredRequirements(district, objective, horizon, frozenset(equipment), extras)


@pytest.fixture(scope="session")
def catalog():
    return bundled_catalog()


@pytest.fixture(scope="session")
def campus():
    return case_variant("campus")


@pytest.fixture(scope="session")
def riverside():
    return case_variant("riverside")


@pytest.fixture(scope="session")
def valley():
    return case_variant("valley33")
