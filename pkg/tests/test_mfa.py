from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from urllib.parse import parse_qs, urlparse

import pytest

from chez.errors import (
    MfaValidationError,
    NoPendingChallenge,
    UnknownUser,
    ValidationError,
)
from chez.mail import InMemoryMailSink
from chez.mfa import MfaService
from chez.model import new_master, new_user, new_user_details
from chez.storage import MemoryStorage
from chez.totp import totp_at, decode_secret


@pytest.fixture
def setup(clock, fast_hasher):
    storage = MemoryStorage()
    mail = InMemoryMailSink()
    svc = MfaService(storage, mail, fast_hasher, clock=clock)
    master = new_master(clock())
    storage.insert("master", master)
    user = new_user(master["id"])
    storage.insert("user", user)
    storage.insert("user_details", new_user_details(
        user["id"], "Ada", "ada@example.com", "33123456789", "x", "01/01/1990"))
    return svc, storage, mail, user["id"]


def _mailed_otp(mail) -> str:
    return mail.sent[-1].link


class TestRequestToggle:
    def test_email_challenge_stores_and_mails_otp(self, setup):
        svc, storage, mail, uid = setup
        svc.request_toggle(uid, "EMAIL")
        row = storage.get("mfa", uid)
        assert row["otp"] is not None
        assert mail.count == 1
        assert mail.sent[0].link == f"{row['otp']:06d}"

    def test_totp_challenge_returns_secret_and_uri(self, setup):
        svc, storage, _, uid = setup
        result = svc.request_toggle(uid, "TOTP")
        assert storage.get("mfa", uid)["totp_secret"] == result["secret"]
        uri = urlparse(result["otpauth_uri"])
        assert uri.scheme == "otpauth" and uri.netloc == "totp"
        query = parse_qs(uri.query)
        assert query["secret"] == [result["secret"]]
        assert query["issuer"] == ["chez"]
        assert "ada%40example.com" in uri.path

    def test_unsupported_type_rejected(self, setup):
        svc, _, _, uid = setup
        with pytest.raises(ValidationError):
            svc.request_toggle(uid, "sms")

    def test_unknown_user(self, setup):
        svc, _, _, _ = setup
        with pytest.raises(UnknownUser):
            svc.request_toggle("ghost", "EMAIL")


class TestConfirmToggle:
    def test_email_enable_returns_ten_backup_codes(self, setup):
        svc, storage, mail, uid = setup
        svc.request_toggle(uid, "EMAIL")
        result = svc.confirm_toggle(uid, _mailed_otp(mail), enable=True)
        assert result["enabled"] is True
        codes = result["backup_codes"]
        assert len(codes) == 10
        assert all(re.fullmatch(r"[A-Za-z0-9]{10}", c) for c in codes)
        row = storage.get("mfa", uid)
        assert row["enabled"] is True
        assert row["otp"] is None
        # stored hashed, never in plaintext
        assert not set(codes) & set(row["backup_codes"])

    def test_totp_enable_via_reference_code(self, setup, clock):
        svc, storage, _, uid = setup
        result = svc.request_toggle(uid, "TOTP")
        code = totp_at(decode_secret(result["secret"]), clock())
        outcome = svc.confirm_toggle(uid, code, enable=True)
        assert outcome["enabled"] is True
        assert storage.get("mfa", uid)["mfa_type"] == "TOTP"

    def test_wrong_otp_leaves_state_unchanged(self, setup):
        svc, storage, mail, uid = setup
        svc.request_toggle(uid, "EMAIL")
        with pytest.raises(MfaValidationError):
            svc.confirm_toggle(uid, "000000" if _mailed_otp(mail) != "000000"
                               else "000001", enable=True)
        assert storage.get("mfa", uid)["enabled"] is False

    def test_no_pending_challenge(self, setup):
        svc, _, _, uid = setup
        with pytest.raises(NoPendingChallenge):
            svc.confirm_toggle(uid, "123456", enable=True)

    def test_disable_erases_secret_and_codes(self, setup, clock):
        svc, storage, _, uid = setup
        result = svc.request_toggle(uid, "TOTP")
        secret = result["secret"]
        svc.confirm_toggle(uid, totp_at(decode_secret(secret), clock()), enable=True)
        svc.request_toggle(uid, "TOTP")
        new_secret = storage.get("mfa", uid)["totp_secret"]
        svc.confirm_toggle(uid, totp_at(decode_secret(new_secret), clock()),
                           enable=False)
        row = storage.get("mfa", uid)
        assert row["enabled"] is False
        assert row["totp_secret"] is None
        assert row["backup_codes"] == []
        # codes derived from the erased secret are dead
        assert not svc.verify_login_factor(uid, totp_at(decode_secret(secret), clock()))

    def test_challenge_expires_after_five_minutes(self, setup, clock):
        svc, _, mail, uid = setup
        svc.request_toggle(uid, "EMAIL")
        otp = _mailed_otp(mail)
        clock.advance(301)
        with pytest.raises(MfaValidationError):
            svc.confirm_toggle(uid, otp, enable=True)
        # challenge voided entirely
        with pytest.raises(NoPendingChallenge):
            svc.confirm_toggle(uid, otp, enable=True)

    def test_five_attempts_void_challenge(self, setup):
        svc, _, mail, uid = setup
        svc.request_toggle(uid, "EMAIL")
        otp = _mailed_otp(mail)
        wrong = "000000" if otp != "000000" else "000001"
        for _ in range(5):
            with pytest.raises(MfaValidationError):
                svc.confirm_toggle(uid, wrong, enable=True)
        with pytest.raises(MfaValidationError):
            svc.confirm_toggle(uid, otp, enable=True)  # voided on 6th


class TestLoginFactors:
    def _enable_email(self, svc, mail, uid):
        svc.request_toggle(uid, "EMAIL")
        return svc.confirm_toggle(uid, _mailed_otp(mail), enable=True)

    def test_email_login_otp_single_use(self, setup):
        svc, _, mail, uid = setup
        self._enable_email(svc, mail, uid)
        channel, otp = svc.login_challenge(uid)
        assert channel == "EMAIL"
        assert svc.verify_login_factor(uid, f"{otp:06d}")
        assert not svc.verify_login_factor(uid, f"{otp:06d}")  # consumed

    def test_totp_login_no_stored_otp(self, setup, clock):
        svc, storage, _, uid = setup
        result = svc.request_toggle(uid, "TOTP")
        svc.confirm_toggle(uid, totp_at(decode_secret(result["secret"]), clock()),
                           enable=True)
        channel, otp = svc.login_challenge(uid)
        assert channel == "TOTP"
        assert otp is None
        code = totp_at(decode_secret(result["secret"]), clock())
        assert svc.verify_login_factor(uid, code)

    def test_backup_code_single_use_and_independent(self, setup):
        svc, _, mail, uid = setup
        codes = self._enable_email(svc, mail, uid)["backup_codes"]
        assert svc.verify_login_factor(uid, codes[3])
        assert not svc.verify_login_factor(uid, codes[3])  # burned
        assert svc.verify_login_factor(uid, codes[7])  # others unaffected

    def test_concurrent_confirms_admit_one_success(self, setup):
        svc, _, mail, uid = setup
        self._enable_email(svc, mail, uid)
        _, otp = svc.login_challenge(uid)
        submitted = f"{otp:06d}"

        with ThreadPoolExecutor(max_workers=8) as pool:
            outcomes = list(pool.map(
                lambda _: svc.verify_login_factor(uid, submitted), range(8)))
        assert sum(outcomes) == 1
