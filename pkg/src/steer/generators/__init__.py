from .base import STEP_SEPARATOR, Backend, Generator, GeneratorError, GeneratorSpec, StepOutput
from .http import HttpGenerator
from .scripted import (
    ScriptExhaustedError,
    ScriptedGenerator,
    ScriptedQuestion,
    ScriptedScenario,
    ScriptStep,
    make_difficulty_profiles,
    synth_scenario,
)

__all__ = [
    "STEP_SEPARATOR", "Backend", "Generator", "GeneratorError", "GeneratorSpec",
    "StepOutput", "HttpGenerator", "ScriptExhaustedError", "ScriptedGenerator",
    "ScriptedQuestion", "ScriptedScenario", "ScriptStep", "make_difficulty_profiles",
    "synth_scenario",
]
