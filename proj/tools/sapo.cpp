// Placeholder main; subcommands land with the cli module.
int main() { return 0; }
