from .arms import ARMS, DISPLAY, SUPPRESS, ArmAssigner, assign_arm, replay_arms, uniform_draw
from .cron import CronSchedule, CronSyntaxError, cron_matches, cron_next, parse_cron
from .engine import (ALERT, LOUD, ROUTES, SILENT, Deployment, DeploymentConflict, EventTrigger, RegistrationFailed,
                     ServeEngine, TimerTrigger, TriggerConfig, alert_document, parse_alert, register_deployment)
from .store import InferencePacket, LabelUpdate, PacketStore, StoreCorruptError, append_packet, read_packets

__all__ = [
    "ARMS", "DISPLAY", "SUPPRESS", "ArmAssigner", "assign_arm", "replay_arms", "uniform_draw",
    "CronSchedule", "CronSyntaxError", "cron_matches", "cron_next", "parse_cron",
    "ALERT", "LOUD", "ROUTES", "SILENT", "Deployment", "DeploymentConflict", "EventTrigger", "RegistrationFailed",
    "ServeEngine", "TimerTrigger", "TriggerConfig", "alert_document", "parse_alert", "register_deployment",
    "InferencePacket", "LabelUpdate", "PacketStore", "StoreCorruptError", "append_packet", "read_packets",
]
