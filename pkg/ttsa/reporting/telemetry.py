"""
TTSA Bilevel Toolkit - MQTT Telemetry Module
============================================

Publishes the progress of long Monte Carlo runs to an MQTT broker:

- <prefix>/status    online / offline (last will) and run lifecycle events
- <prefix>/progress  replicate blocks done, blocks total, blow-ups so far
- <prefix>/result    pass flag and relative covariance errors

Telemetry is off unless the run configuration enables it. A broker that
cannot be reached, or a publish that fails, is logged and otherwise ignored;
payloads never reach the hashed result files.
"""

import json
import logging
import threading
import time

import paho.mqtt.client as mqtt

from ttsa import config

logger = logging.getLogger("Telemetry")


def _default_client(client_id):
    return mqtt.Client(
        callback_api_version=mqtt.CallbackAPIVersion.VERSION2,
        client_id=client_id,
        clean_session=True,
        protocol=mqtt.MQTTv311,
    )


class ProgressPublisher:
    """
    MQTT publisher for run progress.

    Attributes:
        broker_host (str): MQTT broker hostname/IP
        broker_port (int): MQTT broker port
        topic_prefix (str): Topic root of this run
        client: Paho MQTT client instance
        connected (bool): Current connection status
    """

    def __init__(self, settings, client_factory=_default_client):
        """
        Args:
            settings (TelemetrySection): host, port, client_id, topic_prefix, qos
            client_factory (callable): Builds the client from a client id
        """
        self.broker_host = settings.host
        self.broker_port = settings.port
        self.topic_prefix = settings.topic_prefix.rstrip("/")
        self.qos = settings.qos
        self.connected = False
        self._lock = threading.Lock()

        self.client = client_factory(settings.client_id)
        self.client.on_connect = self._on_connect
        self.client.on_disconnect = self._on_disconnect
        self.client.will_set(
            self.topic("status"),
            json.dumps({"status": "offline", "timestamp": time.time()}),
            qos=self.qos,
            retain=False,
        )

    def topic(self, kind):
        return f"{self.topic_prefix}/{config.MQTT_TOPICS[kind]}"

    def _on_connect(self, client, userdata, flags, reason_code, properties):
        if reason_code == 0:
            self.connected = True
            logger.info("Connected to broker %s:%s", self.broker_host, self.broker_port)
            self._publish("status", {"status": "online"})
        else:
            self.connected = False
            logger.warning("Connection failed: %s", reason_code)

    def _on_disconnect(self, client, userdata, disconnect_flags, reason_code, properties):
        self.connected = False
        if reason_code != 0:
            logger.warning("Unexpected disconnection (%s)", reason_code)
        else:
            logger.info("Disconnected from broker")

    def connect(self):
        """
        Connect and start the network loop.

        Returns:
            bool: True if the connection was initiated
        """
        try:
            self.client.connect(self.broker_host, self.broker_port, keepalive=config.MQTT_KEEP_ALIVE)
            self.client.loop_start()
            logger.info("Connecting to %s:%s...", self.broker_host, self.broker_port)
            return True
        except Exception as exc:
            logger.warning("Connection error: %s", exc)
            self.connected = False
            return False

    def disconnect(self):
        try:
            self._publish("status", {"status": "finished"})
            self.client.loop_stop()
            self.client.disconnect()
        except Exception as exc:
            logger.warning("Disconnection error: %s", exc)
        finally:
            self.connected = False

    def _publish(self, kind, payload):
        try:
            with self._lock:
                message = json.dumps({**payload, "timestamp": time.time()})
                result = self.client.publish(self.topic(kind), message, qos=self.qos, retain=False)
                if result.rc == mqtt.MQTT_ERR_SUCCESS:
                    return True
                logger.warning("Publish error on %s: %s", kind, result.rc)
                return False
        except Exception as exc:
            logger.warning("Error publishing %s: %s", kind, exc)
            return False

    def publish_status(self, status, **details):
        return self._publish("status", {"status": status, **details})

    def publish_progress(self, blocks_done, blocks_total, blowups):
        """Progress callback for the replicate runner."""
        return self._publish(
            "progress",
            {"blocks_done": int(blocks_done), "blocks_total": int(blocks_total), "blowups": int(blowups)},
        )

    def publish_result(self, report):
        """
        Args:
            report (MCReport): Finished verification
        """
        return self._publish(
            "result",
            {
                "pass": report.passed,
                "rel_error_x": report.rel_error_x,
                "rel_error_y": report.rel_error_y,
                "cross_block_ratio": report.cross_block_ratio,
                "blowups": report.blowups,
            },
        )

    def get_status(self):
        return {
            "connected": self.connected,
            "broker_host": self.broker_host,
            "broker_port": self.broker_port,
            "topic_prefix": self.topic_prefix,
        }


class NullPublisher:
    """Stand-in when telemetry is disabled."""

    def connect(self):
        return False

    def disconnect(self):
        pass

    def publish_status(self, status, **details):
        return False

    def publish_progress(self, blocks_done, blocks_total, blowups):
        return False

    def publish_result(self, report):
        return False


def make_publisher(settings, client_factory=_default_client):
    if not settings.enabled:
        return NullPublisher()
    return ProgressPublisher(settings, client_factory=client_factory)
