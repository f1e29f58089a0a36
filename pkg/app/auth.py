"""Bearer-token check for the simulation API."""

import hmac
import logging

from fastapi import Depends, HTTPException, Security, status
from fastapi.security import HTTPAuthorizationCredentials, HTTPBearer

from app.config import AppConfig, get_config

logger = logging.getLogger(__name__)

security_scheme = HTTPBearer()


async def verify_api_key(
    credentials: HTTPAuthorizationCredentials = Security(security_scheme),
    config: AppConfig = Depends(get_config),
) -> str:
    """Compare the Bearer token with ``[auth] api_key`` in constant time."""
    if not hmac.compare_digest(credentials.credentials.encode(), config.api_key.encode()):
        logger.warning("Rejected simulation request: invalid API key")
        raise HTTPException(
            status_code=status.HTTP_401_UNAUTHORIZED,
            detail="Invalid API key",
        )
    return credentials.credentials
