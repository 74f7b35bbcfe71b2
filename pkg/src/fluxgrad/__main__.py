from fluxgrad.cli import main

main()
