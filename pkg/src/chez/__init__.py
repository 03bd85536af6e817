"""chez: a desk-scale zero-trust CIAM/PAM server.

Subsystems: multi-tenant identity core and storage, registration and
recovery flows, typed tokens and the login state machine, MFA (email OTP,
TOTP, backup codes), group/permission administration, a policy engine
(attribute collection, decisions with reason codes, tag filtering), an
enforcing gateway, a credential vault with automated rotation and
privileged-session recording, and a statistical session monitor that feeds
adaptive MFA.
"""

__version__ = "0.1.0"
