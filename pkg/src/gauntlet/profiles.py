"""Client fingerprint profiles.

Mirrors the signals the real widget collects from browsers: family and
version strings, device class, screen geometry, plugin count, automation
flags and dynamic input-event counts. IP handling is declarative: the
``ip_tag`` stands in for the address type.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

from .errors import ConfigError

IP_TAGS = ("regular", "academic", "vpn", "tor")
DEVICE_TYPES = ("desktop", "mobile")


@dataclass(frozen=True)
class ClientProfile:
    ip_tag: str
    browser_family: str
    browser_version: str
    os_family: str
    device_type: str
    screen_resolution: tuple[int, int]
    plugin_count: int
    webdriver: bool
    headless: bool
    touch_support: bool
    canvas_support: bool
    wasm_support: bool
    keypress_events: int
    scroll_events: int
    touch_events: int

    def __post_init__(self):
        if self.ip_tag not in IP_TAGS:
            raise ConfigError(f"ip_tag must be one of {IP_TAGS}, got {self.ip_tag!r}")
        if self.device_type not in DEVICE_TYPES:
            raise ConfigError(f"device_type must be one of {DEVICE_TYPES}")
        if min(self.plugin_count, self.keypress_events, self.scroll_events, self.touch_events) < 0:
            raise ConfigError("counts must be >= 0")
        w, h = self.screen_resolution
        if w <= 0 or h <= 0:
            raise ConfigError("screen resolution must be positive")

    @property
    def flagged_automated(self) -> bool:
        """Unambiguous automation advertisement."""
        return self.webdriver or self.headless

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["screen_resolution"] = list(self.screen_resolution)
        return d

    @classmethod
    def from_json_dict(cls, data: dict) -> "ClientProfile":
        required = {f for f in cls.__dataclass_fields__}
        missing = required - set(data)
        extra = set(data) - required
        if missing:
            raise ConfigError(f"profile missing fields: {sorted(missing)}")
        if extra:
            raise ConfigError(f"profile has unknown fields: {sorted(extra)}")
        res = data["screen_resolution"]
        if not isinstance(res, (list, tuple)) or len(res) != 2:
            raise ConfigError("screen_resolution must be [width, height]")
        kwargs = dict(data)
        kwargs["screen_resolution"] = (int(res[0]), int(res[1]))
        return cls(**kwargs)


def _human(ip_tag: str) -> ClientProfile:
    return ClientProfile(
        ip_tag=ip_tag,
        browser_family="Firefox",
        browser_version="65.0",
        os_family="Linux",
        device_type="desktop",
        screen_resolution=(1920, 1080),
        plugin_count=4,
        webdriver=False,
        headless=False,
        touch_support=False,
        canvas_support=True,
        wasm_support=True,
        keypress_events=12,
        scroll_events=5,
        touch_events=0,
    )


PROFILE_PRESETS: dict[str, ClientProfile] = {
    "regular": _human("regular"),
    "academic": _human("academic"),
    "vpn": _human("vpn"),
    "tor": _human("tor"),
    # Automation client that advertises itself (webdriver flag on).
    "bot_webdriver": ClientProfile(
        ip_tag="regular",
        browser_family="Firefox",
        browser_version="65.0",
        os_family="Linux",
        device_type="desktop",
        screen_resolution=(1280, 720),
        plugin_count=0,
        webdriver=True,
        headless=False,
        touch_support=False,
        canvas_support=True,
        wasm_support=True,
        keypress_events=0,
        scroll_events=0,
        touch_events=0,
    ),
    # Headless automation: the strongest bot signal combination.
    "bot_headless": ClientProfile(
        ip_tag="regular",
        browser_family="Firefox",
        browser_version="65.0",
        os_family="Linux",
        device_type="desktop",
        screen_resolution=(800, 600),
        plugin_count=0,
        webdriver=True,
        headless=True,
        touch_support=False,
        canvas_support=False,
        wasm_support=True,
        keypress_events=0,
        scroll_events=0,
        touch_events=0,
    ),
}


def profile_preset(name: str) -> ClientProfile:
    try:
        return PROFILE_PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown profile preset {name!r}; choose from {sorted(PROFILE_PRESETS)}"
        ) from None


def with_flags(profile: ClientProfile, *, webdriver: bool | None = None,
               headless: bool | None = None) -> ClientProfile:
    """Copy a profile with automation flags overridden."""
    d = profile.to_json_dict()
    if webdriver is not None:
        d["webdriver"] = webdriver
    if headless is not None:
        d["headless"] = headless
    return ClientProfile.from_json_dict(d)
