from slack_sdk.errors import SlackApiError

from src import slack_client
from src.config import cfg


class FakeClient:
    def __init__(self, fail=False):
        self.fail = fail
        self.posted = []

    def chat_postMessage(self, channel, text, mrkdwn):
        if self.fail:
            raise SlackApiError("boom", {"ok": False, "error": "channel_not_found"})
        self.posted.append((channel, text))
        return {"ts": "1.0"}


def test_post_is_skipped_without_token(monkeypatch):
    monkeypatch.setattr(cfg, "SLACK_BOT_TOKEN", None)
    assert slack_client.post_summary("hello") is False


def test_post_uses_configured_channel(monkeypatch):
    fake = FakeClient()
    monkeypatch.setattr(cfg, "SLACK_BOT_TOKEN", "xoxb-test")
    monkeypatch.setattr(cfg, "SLACK_REPORT_CHANNEL", "#bench")
    monkeypatch.setattr(slack_client, "_client", fake)
    assert slack_client.post_summary("digest") is True
    assert fake.posted == [("#bench", "digest")]


def test_api_error_does_not_raise(monkeypatch):
    monkeypatch.setattr(cfg, "SLACK_BOT_TOKEN", "xoxb-test")
    monkeypatch.setattr(slack_client, "_client", FakeClient(fail=True))
    assert slack_client.post_summary("digest") is False
