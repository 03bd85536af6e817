"""Mail dispatch: client interface, in-memory sink, SMTP adapter.

Flows hand the client a link (or raw OTP), the recipient, and a template
id; what the message body looks like is the template's business, not ours.
"""

from __future__ import annotations

import smtplib
from dataclasses import dataclass
from email.message import EmailMessage


@dataclass(frozen=True)
class MailMessage:
    to: str
    template_id: str
    link: str  # embeds exactly one typed token (or a raw OTP for MFA mails)


class MailClient:
    def send(self, message: MailMessage) -> None:
        raise NotImplementedError


class InMemoryMailSink(MailClient):
    def __init__(self):
        self.sent: list[MailMessage] = []

    def send(self, message: MailMessage) -> None:
        self.sent.append(message)

    def clear(self) -> None:
        self.sent.clear()

    @property
    def count(self) -> int:
        return len(self.sent)


class SmtpMailClient(MailClient):
    """Thin SMTP relay adapter; one connection per message is fine at this
    scale."""

    def __init__(self, host: str, port: int = 25, sender: str = "no-reply@chez.local"):
        self.host = host
        self.port = port
        self.sender = sender

    def send(self, message: MailMessage) -> None:
        email = EmailMessage()
        email["From"] = self.sender
        email["To"] = message.to
        email["Subject"] = message.template_id
        email.set_content(message.link)
        with smtplib.SMTP(self.host, self.port, timeout=10) as smtp:
            smtp.send_message(email)
