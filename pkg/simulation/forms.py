from fractions import Fraction

from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from economics.services.market import MarketError, MarketParams, derive_market, reference_prices
from simulation.services.llm_client import IoMode
from simulation.services.policy import PolicySpec
from simulation.services.prompts import Persona


class FractionField(forms.FloatField):
    """Float field that also accepts fraction literals such as 1/300."""

    def to_python(self, value):
        if isinstance(value, str) and "/" in value:
            try:
                value = float(Fraction(value.strip()))
            except (ValueError, ZeroDivisionError) as exc:
                raise ValidationError(self.error_messages["invalid"], code="invalid") from exc
        if isinstance(value, bool):
            raise ValidationError(self.error_messages["invalid"], code="invalid")
        return super().to_python(value)


class ScheduleField(forms.Field):
    """`true` / `false`, or a list of segments `{from: 1, to: 400, enabled: true}`.

    Cleans to a bool or a tuple of (from_round, to_round, enabled) triples.
    """

    def to_python(self, value):
        if value is None or isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ("true", "false"):
            return value.strip().lower() == "true"
        if not isinstance(value, (list, tuple)) or not value:
            raise ValidationError("Enter true, false or a list of round segments.", code="invalid")
        segments = []
        for item in value:
            if isinstance(item, dict):
                item = (item.get("from"), item.get("to"), item.get("enabled"))
            if not isinstance(item, (list, tuple)) or len(item) != 3:
                raise ValidationError("Each segment needs from, to and enabled.", code="invalid")
            start, end, enabled = item
            if not all(isinstance(r, int) and not isinstance(r, bool) for r in (start, end)):
                raise ValidationError("Segment rounds must be integers.", code="invalid")
            if not isinstance(enabled, bool):
                raise ValidationError("Segment enabled must be true or false.", code="invalid")
            segments.append((start, end, enabled))
        return tuple(segments)


class PersonaField(forms.Field):
    """One persona for both firms, or a pair."""

    def to_python(self, value):
        if value is None:
            return None
        values = list(value) if isinstance(value, (list, tuple)) else [value, value]
        if len(values) != 2:
            raise ValidationError("Give one persona or one per firm.", code="invalid")
        personas = []
        for item in values:
            key = str(item).strip().lower()
            if key not in Persona.values:
                raise ValidationError(
                    f"Unknown persona {item!r}; expected one of {', '.join(Persona.labels)}.", code="invalid"
                )
            personas.append(Persona(key))
        return tuple(personas)


class PolicyField(forms.Field):
    def to_python(self, value):
        if value is None or value == "":
            return None
        try:
            return PolicySpec.from_value(value)
        except ValueError as exc:
            raise ValidationError(str(exc), code="invalid") from exc


class FirmNamesField(forms.Field):
    def to_python(self, value):
        if value is None:
            return None
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ValidationError("Give exactly two firm names.", code="invalid")
        names = tuple(str(name).strip() for name in value)
        if not all(names) or names[0] == names[1]:
            raise ValidationError("Firm names must be non-empty and distinct.", code="invalid")
        return names


class OverridesField(forms.Field):
    """Mapping of detector overrides restricted to known keys."""

    def __init__(self, *, allowed: dict, **kwargs):
        self.allowed = allowed
        super().__init__(**kwargs)

    def to_python(self, value):
        if value in (None, ""):
            return {}
        if not isinstance(value, dict):
            raise ValidationError("Enter a mapping.", code="invalid")
        unknown = sorted(set(value) - set(self.allowed))
        if unknown:
            raise ValidationError(f"Unknown keys: {', '.join(unknown)}.", code="invalid")
        cleaned = {}
        for key, cast in self.allowed.items():
            if key in value:
                try:
                    cleaned[key] = cast(value[key])
                except (TypeError, ValueError) as exc:
                    raise ValidationError(f"{key} must be a number.", code="invalid") from exc
        return cleaned


class ModelSettingsForm(forms.Form):
    model_id = forms.CharField(required=False)
    temperature = forms.FloatField(required=False, min_value=0)
    max_tokens = forms.IntegerField(required=False, min_value=1)
    endpoint = forms.CharField(required=False)
    api_key_env = forms.CharField(required=False)
    parse_retries = forms.IntegerField(required=False, min_value=0)

    def clean(self):
        cleaned = super().clean()
        defaults = {
            "model_id": getattr(settings, "LLM_DEFAULT_MODEL", "gpt-4-0314"),
            "temperature": 0.7,
            "max_tokens": 128,
            "endpoint": getattr(settings, "LLM_API_BASE", "https://api.openai.com/v1"),
            "api_key_env": getattr(settings, "LLM_API_KEY_ENV", "OPENAI_API_KEY"),
            "parse_retries": 3,
        }
        for name, default in defaults.items():
            if cleaned.get(name) in (None, ""):
                cleaned[name] = default
        return cleaned


class ModelField(forms.Field):
    def to_python(self, value):
        if value in (None, ""):
            value = {}
        if not isinstance(value, dict):
            raise ValidationError("Enter a mapping of model settings.", code="invalid")
        unknown = sorted(set(value) - set(ModelSettingsForm.base_fields))
        if unknown:
            raise ValidationError(f"Unknown model settings: {', '.join(unknown)}.", code="invalid")
        form = ModelSettingsForm(data=value)
        if not form.is_valid():
            raise ValidationError(
                [f"{field}: {message}" for field, messages in form.errors.items() for message in messages],
                code="invalid",
            )
        return form.cleaned_data


class RunConfigForm(forms.Form):
    """Validates one run configuration; keys follow the experiment-table columns."""

    run_id = forms.SlugField(required=False)
    planning = ScheduleField()
    conversation = ScheduleField()
    persona = PersonaField()
    cost1 = FractionField(min_value=0)
    cost2 = FractionField(min_value=0)
    init_price1 = FractionField(min_value=0)
    init_price2 = FractionField(min_value=0)
    a = FractionField()
    beta = FractionField()
    d = FractionField()
    rounds = forms.IntegerField(min_value=1)
    policy1 = PolicyField()
    policy2 = PolicyField()
    seed = forms.IntegerField(required=False, min_value=0)
    io_mode = forms.ChoiceField(required=False, choices=IoMode.choices)
    cassette = forms.CharField(required=False)
    checkpoint_every = forms.IntegerField(required=False, min_value=0)
    model = ModelField(required=False)
    firm_names = FirmNamesField(required=False)
    convergence = OverridesField(required=False, allowed={"epsilon": float, "theta": float, "window": int})
    oscillation = OverridesField(required=False, allowed={"bound": float, "window": int})

    def clean_rounds(self):
        rounds = self.cleaned_data["rounds"]
        hard_cap = int(getattr(settings, "DUOPOLY_HARD_CAP", 2000))
        if rounds > hard_cap:
            raise ValidationError(f"Runs stop at round {hard_cap}; rounds cannot exceed it.", code="max_value")
        return rounds

    def clean(self):
        cleaned = super().clean()
        rounds = cleaned.get("rounds")
        for name in ("planning", "conversation"):
            schedule = cleaned.get(name)
            if isinstance(schedule, tuple) and rounds:
                problem = schedule_problem(schedule, rounds)
                if problem:
                    self.add_error(name, problem)

        numbers = [cleaned.get(name) for name in ("a", "beta", "d", "cost1", "cost2")]
        if None not in numbers:
            params = MarketParams(a=numbers[0], beta=numbers[1], d=numbers[2], c1=numbers[3], c2=numbers[4])
            issues = params.problems()
            for issue in issues:
                self.add_error(None, issue)
            if not issues:
                try:
                    reference_prices(derive_market(params))
                except MarketError as exc:
                    self.add_error(None, str(exc))

        if cleaned.get("io_mode") in (IoMode.RECORD, IoMode.REPLAY) and not cleaned.get("cassette"):
            self.add_error("cassette", "Record and replay modes need a cassette path.")
        return cleaned


def schedule_problem(segments, rounds: int) -> str | None:
    expected = 1
    for start, end, _ in segments:
        if start != expected or end < start:
            return f"Segments must be contiguous from round 1; expected a segment starting at {expected}."
        expected = end + 1
    if expected != rounds + 1:
        return f"Segments must cover rounds 1 to {rounds}."
    return None
