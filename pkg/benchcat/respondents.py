"""Responders supplying binary answers to administered items.

A responder is a callable item_id -> 0 | 1 with a respondent_id attribute.
Failures raise ResponderError, which aborts the session while keeping its
partial record.
"""
import hashlib
import json
import math
import shlex
import subprocess
from typing import Optional
import numpy as np
from pydantic import BaseModel, validator  # pylint: disable=no-name-in-module
from benchcat.config import DEFAULT_RESPONDER_TIMEOUT, PopulationConfig
from benchcat.errors import ConfigurationError, ResponderError
from benchcat.irt import icc_arrays
from benchcat.model import ResponseMatrix


RESPONDER_KINDS = ("matrix", "simulated", "external")
SELECTION_STREAM = "selection"
RESPONSE_STREAM = "response"


def substream(seed, key):
    """Return a Philox generator for a named substream of seed.

    key is hashed stably (sha256) so substreams do not depend on the
    process's string hash seed.
    """
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    spawn_key = (int.from_bytes(digest[:8], "little"),)
    sequence = np.random.SeedSequence(seed, spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(sequence))


def respondent_stream(seed, stream, respondent_id):
    """Return the substream named stream/respondent_id.

    Item selection and simulated answers of one respondent draw from
    different streams.
    """
    return substream(seed, f"{stream}/{respondent_id}")


# ============================ responders =====================================
class MatrixResponder:
    """Replay one model's stored responses."""

    def __init__(self, matrix, model_id, respondent_id=None):
        if not matrix.has_model(model_id):
            raise KeyError(f"Unknown model {model_id}.")
        self.matrix = matrix
        self.model_id = model_id
        self.respondent_id = respondent_id or model_id

    def __call__(self, item_id):
        if not self.matrix.has_item(item_id):
            raise ResponderError(
                f"Item {item_id} is not a column of the response matrix."
            )
        value = self.matrix.cell(self.model_id, item_id)
        if math.isnan(value):
            raise ResponderError(
                f"Missing response of {self.model_id} to item {item_id}."
            )
        return int(value)


class SimulatedResponder:
    """Answer with probability icc_3pl(params, theta_true).

    Each call consumes one uniform draw of a seeded Philox stream, so a
    given item sequence reproduces the same answers.
    """

    def __init__(self, theta_true, bank, seed, respondent_id=None):
        self.theta_true = float(theta_true)
        self.bank = bank
        self.respondent_id = respondent_id or f"sim-{theta_true:+.4f}"
        self.rng = respondent_stream(
            seed, RESPONSE_STREAM, self.respondent_id
        )

    def __call__(self, item_id):
        params = self.bank[item_id]
        prob = icc_arrays(params.a, params.b, params.c, self.theta_true)
        return int(self.rng.random() < prob)


class ExternalResponder:
    """Ask an external command for each answer.

    The command receives one JSON line {"item_id": ..., "meta": {...}} on
    standard input and must print {"correct": 0} or {"correct": 1}.
    The template may contain {respondent_id}.
    """

    def __init__(self, command_template, timeout=DEFAULT_RESPONDER_TIMEOUT,
                 content=None, respondent_id="external"):
        self.respondent_id = respondent_id
        self.command = shlex.split(
            command_template.replace("{respondent_id}", respondent_id)
        )
        if not self.command:
            raise ConfigurationError("External responder command is empty.")
        self.timeout = timeout
        self.content = content or {}

    def payload(self, item_id):
        """Return the request line for item_id."""
        return json.dumps({
            "item_id": item_id, "meta": self.content.get(item_id, {})
        }) + "\n"

    def __call__(self, item_id):
        try:
            result = subprocess.run(
                self.command, input=self.payload(item_id),
                capture_output=True, text=True, timeout=self.timeout,
                check=True,
            )
        except subprocess.TimeoutExpired as error:
            raise ResponderError(
                f"Responder timed out after {self.timeout} s on {item_id}."
            ) from error
        except subprocess.CalledProcessError as error:
            raise ResponderError(
                f"Responder exited with {error.returncode} on {item_id}: "
                f"{error.stderr.strip()}"
            ) from error
        except OSError as error:
            raise ResponderError(f"Cannot run responder: {error}") from error
        return parse_answer(result.stdout, item_id)


def parse_answer(output, item_id):
    """Parse the first non-empty output line as {"correct": 0 | 1}."""
    lines = [line for line in output.splitlines() if line.strip()]
    if not lines:
        raise ResponderError(f"Responder printed nothing for {item_id}.")
    try:
        answer = json.loads(lines[0])
    except json.JSONDecodeError as error:
        raise ResponderError(
            f"Unparseable responder output for {item_id}: {lines[0]!r}"
        ) from error
    correct = answer.get("correct") if isinstance(answer, dict) else None
    if isinstance(correct, bool) or correct not in (0, 1):
        raise ResponderError(
            f"Responder output for {item_id} lacks a binary 'correct': "
            f"{lines[0]!r}"
        )
    return int(correct)


# ============================ specs ==========================================
# pylint: disable=too-few-public-methods
class ResponderSpec(BaseModel):
    """Declarative description of one responder."""

    kind: str
    respondent_id: str
    model_id: Optional[str] = None
    theta_true: Optional[float] = None
    seed: Optional[int] = None
    command: Optional[str] = None
    timeout: float = DEFAULT_RESPONDER_TIMEOUT

    class Config:
        """Reject unknown keys."""

        extra = "forbid"

    @validator("kind")
    def check_kind(cls, value):  # pylint: disable=E0213
        """kind is matrix, simulated or external."""
        if value not in RESPONDER_KINDS:
            raise ValueError(f"Invalid responder kind: {value}.")
        return value

    @validator("command", always=True)
    def check_payload(cls, value, values):  # pylint: disable=E0213
        """Exactly the payload of the declared kind is populated."""
        kind = values.get("kind")
        populated = {
            "matrix": values.get("model_id") is not None,
            "simulated": values.get("theta_true") is not None,
            "external": value is not None,
        }
        if kind in populated:
            if not populated[kind]:
                raise ValueError(f"Missing payload for a {kind} responder.")
            extra = [name for name, present in populated.items()
                     if present and name != kind]
            if extra:
                raise ValueError(
                    f"A {kind} responder also has {extra} payloads."
                )
        return value


def build_responder(spec, bank=None, matrix=None, content=None):
    """Instantiate the responder a ResponderSpec describes."""
    if spec.kind == "matrix":
        if matrix is None:
            raise ConfigurationError("A matrix responder needs a matrix.")
        return MatrixResponder(matrix, spec.model_id, spec.respondent_id)
    if spec.kind == "simulated":
        if bank is None:
            raise ConfigurationError("A simulated responder needs a bank.")
        seed = 0 if spec.seed is None else spec.seed
        return SimulatedResponder(
            spec.theta_true, bank, seed, spec.respondent_id
        )
    return ExternalResponder(
        spec.command, spec.timeout, content, spec.respondent_id
    )


def load_content(path):
    """Load optional item metadata: JSON item_id -> {prompt, choices}."""
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as file:
        try:
            content = json.load(file)
        except json.JSONDecodeError as error:
            raise ConfigurationError(
                f"Invalid JSON in content file {path}: {error}"
            ) from error
    if not isinstance(content, dict):
        raise ConfigurationError(
            f"Content file {path} must map item ids to metadata objects."
        )
    return content


# ============================ simulation =====================================
def sample_population(config=None, seed=0):
    """Return {respondent id: theta_true} drawn from a PopulationConfig."""
    config = config or PopulationConfig()
    rng = substream(seed, "population")
    if config.distribution == "normal":
        thetas = rng.normal(config.loc, config.scale, config.n)
    else:
        thetas = rng.uniform(config.loc, config.loc + config.scale, config.n)
    width = max(len(str(config.n - 1)), 5)
    return {f"sim-{idx:0{width}d}": float(theta)
            for idx, theta in enumerate(thetas)}


def simulate_matrix(item_ids, a, b, c, thetas, seed=0):
    """Simulate a complete response matrix from 3PL parameters.

    thetas maps model id -> true ability.
    """
    rng = substream(seed, "matrix")
    theta = np.array(list(thetas.values()), dtype=float)
    prob = icc_arrays(
        np.asarray(a)[np.newaxis, :], np.asarray(b)[np.newaxis, :],
        np.asarray(c)[np.newaxis, :], theta[:, np.newaxis],
    )
    values = (rng.random(prob.shape) < prob).astype(float)
    return ResponseMatrix(list(thetas), item_ids, values)
