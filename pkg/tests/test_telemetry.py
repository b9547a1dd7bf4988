import json
from types import SimpleNamespace

import paho.mqtt.client as mqtt
import pytest

from ttsa.reporting.telemetry import NullPublisher, ProgressPublisher, make_publisher
from ttsa.run_config import TelemetrySection


class FakeClient:
    """Records what the publisher does with its MQTT client."""

    def __init__(self, client_id, rc=mqtt.MQTT_ERR_SUCCESS, refuse=False):
        self.client_id = client_id
        self.rc = rc
        self.refuse = refuse
        self.will = None
        self.published = []
        self.loop_running = False
        self.on_connect = None
        self.on_disconnect = None

    def will_set(self, topic, payload, qos, retain):
        self.will = (topic, json.loads(payload))

    def connect(self, host, port, keepalive):
        if self.refuse:
            raise ConnectionRefusedError("broker down")
        self.on_connect(self, None, None, 0, None)

    def loop_start(self):
        self.loop_running = True

    def loop_stop(self):
        self.loop_running = False

    def disconnect(self):
        self.on_disconnect(self, None, None, 0, None)

    def publish(self, topic, payload, qos, retain):
        self.published.append((topic, json.loads(payload)))
        return SimpleNamespace(rc=self.rc)


@pytest.fixture
def settings():
    return TelemetrySection(enabled=True, client_id="test-runner", topic_prefix="lab/runs/")


def _publisher(settings, **fake_options):
    clients = []

    def factory(client_id):
        clients.append(FakeClient(client_id, **fake_options))
        return clients[-1]

    return ProgressPublisher(settings, client_factory=factory), clients


def test_lifecycle_messages(settings):
    publisher, (client,) = _publisher(settings)
    assert client.client_id == "test-runner"
    assert client.will[0] == "lab/runs/status"
    assert client.will[1]["status"] == "offline"

    assert publisher.connect()
    assert publisher.connected
    assert client.loop_running
    assert publisher.publish_progress(2, 5, 1)
    publisher.disconnect()
    assert not publisher.connected
    assert not client.loop_running

    topics = [topic for topic, _ in client.published]
    assert topics == ["lab/runs/status", "lab/runs/progress", "lab/runs/status"]
    progress = client.published[1][1]
    assert (progress["blocks_done"], progress["blocks_total"], progress["blowups"]) == (2, 5, 1)
    assert client.published[0][1]["status"] == "online"
    assert client.published[2][1]["status"] == "finished"


def test_publish_result(settings):
    publisher, (client,) = _publisher(settings)
    report = SimpleNamespace(passed=True, rel_error_x=0.05, rel_error_y=0.07, cross_block_ratio=0.01, blowups=0)
    assert publisher.publish_result(report)
    topic, payload = client.published[-1]
    assert topic == "lab/runs/result"
    assert payload["pass"] is True
    assert payload["rel_error_y"] == 0.07


def test_failed_publish_is_reported_not_raised(settings):
    publisher, _ = _publisher(settings, rc=mqtt.MQTT_ERR_NO_CONN)
    assert publisher.publish_status("running", problem="quadratic1d") is False


def test_unreachable_broker_is_tolerated(settings):
    publisher, _ = _publisher(settings, refuse=True)
    assert publisher.connect() is False
    assert not publisher.connected
    publisher.disconnect()
    assert publisher.get_status()["broker_port"] == 1883


def test_make_publisher(settings):
    assert isinstance(make_publisher(TelemetrySection()), NullPublisher)
    publisher = make_publisher(settings, client_factory=lambda client_id: FakeClient(client_id))
    assert isinstance(publisher, ProgressPublisher)
    assert publisher.get_status()["topic_prefix"] == "lab/runs"


def test_null_publisher_is_silent():
    publisher = NullPublisher()
    assert publisher.connect() is False
    assert publisher.publish_progress(1, 1, 0) is False
    publisher.disconnect()
