"""HTTP and CLI front door for a running deployment."""
